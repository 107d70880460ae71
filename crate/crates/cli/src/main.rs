//! `angdroop`: runs scenario files and invariant suites for angular droop
//! control experiments.

mod run;
mod scenario;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use scenario::{ExperimentKind, Override, ScenarioSource, BUILTIN};

#[derive(Parser)]
#[command(name = "angdroop", version, about = "Angular droop control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its CSV trajectories and metrics.json.
    Run {
        /// Scenario file path or built-in name (see list-scenarios).
        #[arg(long)]
        scenario: String,
        /// Output directory; defaults to the scenario's `output` or out/<name>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override a scenario value, e.g. --set gains.alpha=0.4 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Run an invariant suite with fixed seeds; exit status reflects the result.
    Verify {
        #[arg(value_enum, default_value = "all")]
        suite: verify::Suite,
        /// Reduced-model scenario for the nonlinear suites (default: reduced_ring).
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List the built-in scenarios.
    ListScenarios,
}

fn overrides(set: &[String], seed: Option<u64>, dt: Option<f64>, horizon: Option<f64>) -> Result<Vec<Override>> {
    let mut out = set
        .iter()
        .map(|s| Override::parse(s).map_err(anyhow::Error::msg))
        .collect::<Result<Vec<_>>>()?;
    let flags = [
        ("seed", seed.map(|v| json!(v))),
        ("dt", dt.map(|v| json!(v))),
        ("horizon", horizon.map(|v| json!(v))),
    ];
    for (key, value) in flags {
        if let Some(value) = value {
            out.push(Override {
                key: key.into(),
                value,
            });
        }
    }
    Ok(out)
}

fn run_command(
    scenario: &str,
    out: Option<PathBuf>,
    set: &[String],
    seed: Option<u64>,
    dt: Option<f64>,
    horizon: Option<f64>,
) -> Result<()> {
    let overrides = overrides(set, seed, dt, horizon)?;
    let source = ScenarioSource::load(scenario)?;
    let experiment = source.resolve(&overrides)?;
    let dir = out
        .or_else(|| experiment.settings.output.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out").join(&experiment.settings.name));
    let artifacts = run::execute(&experiment).with_context(|| format!("running {}", source.label))?;
    let written = artifacts.write(&dir)?;
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn verify_command(suite: verify::Suite, scenario: Option<&str>, set: &[String], seed: u64) -> Result<bool> {
    let overrides = overrides(set, None, None, None)?;
    let source = ScenarioSource::load(scenario.unwrap_or("reduced_ring"))?;
    let experiment = source.resolve(&overrides)?;
    let system = match experiment.kind {
        ExperimentKind::Reduced(r) => r.system,
        _ => bail!("{}: verify needs a scenario with model `reduced`", source.label),
    };
    let subject = verify::Subject::new(system)?;
    let checks = verify::run(suite, &subject, seed)?;
    let mut failed = Vec::new();
    for c in &checks {
        let status = if c.passed() { "PASS" } else { "FAIL" };
        println!("{status} [{}] {}: {:.3e} (tol {:.0e})", c.suite, c.name, c.measured, c.tolerance);
        if !c.passed() {
            failed.push(c);
        }
    }
    if failed.is_empty() {
        println!("{} checks passed", checks.len());
        Ok(true)
    } else {
        eprintln!("{} of {} checks failed:", failed.len(), checks.len());
        for c in failed {
            eprintln!("  [{}] {}", c.suite, c.name);
        }
        Ok(false)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            scenario,
            out,
            set,
            seed,
            dt,
            horizon,
        } => run_command(&scenario, out, &set, seed, dt, horizon).map(|_| true),
        Command::Verify {
            suite,
            scenario,
            set,
            seed,
        } => verify_command(suite, scenario.as_deref(), &set, seed),
        Command::ListScenarios => {
            for (name, description, _) in BUILTIN {
                println!("{name:<16} {description}");
            }
            Ok(true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
