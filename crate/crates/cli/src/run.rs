//! Executes a validated experiment and produces its artifacts in memory.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use angdroop::converter::{nominal_power_reference, ConverterNetwork};
use angdroop::linear::{coherence_row, empirical_coherence, write_coherence_csv, DroopKind, LinearizedSystem};
use angdroop::sim::{simulate, FnDynamics, Trajectory};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use serde_json::{json, Map, Value};

use crate::scenario::{
    CoherenceExperiment, ConverterExperiment, Experiment, ExperimentKind, LinearizedExperiment,
    ReducedExperiment, RunSettings,
};

/// Largest state dimension for which the Kronecker-based H2 oracle is used.
const ORACLE_MAX_DIM: usize = 30;

/// Files to write plus the metrics report.
pub struct Artifacts {
    pub files: Vec<(String, Vec<u8>)>,
    pub metrics: Map<String, Value>,
}

impl Artifacts {
    fn new(settings: &RunSettings) -> Self {
        let mut metrics = Map::new();
        for key in ["freq_error_final", "settle_time_s", "coherence_value", "bound", "hjb_residual_max"] {
            metrics.insert(key.into(), Value::Null);
        }
        metrics.insert("scenario".into(), json!(settings.name));
        metrics.insert("model".into(), json!(settings.model.name()));
        if let Some(d) = &settings.description {
            metrics.insert("description".into(), json!(d));
        }
        metrics.insert("seed".into(), json!(settings.seed));
        metrics.insert("dt".into(), json!(settings.dt));
        metrics.insert("horizon".into(), json!(settings.horizon));
        metrics.insert("record_stride".into(), json!(settings.record_stride));
        let overrides: Map<String, Value> = settings
            .overrides
            .iter()
            .map(|o| (o.key.clone(), o.value.clone()))
            .collect();
        metrics.insert("overrides".into(), Value::Object(overrides));
        Self {
            files: Vec::new(),
            metrics,
        }
    }

    fn set(&mut self, key: &str, value: Value) {
        self.metrics.insert(key.into(), value);
    }

    fn csv(&mut self, name: &str, traj: &Trajectory<f64>, columns: &[String]) -> Result<()> {
        let mut buf = Vec::new();
        traj.write_csv(&mut buf, columns)?;
        self.files.push((name.into(), buf));
        Ok(())
    }

    /// Writes every artifact into `dir`. On failure the files written so
    /// far are removed again.
    pub fn write(mut self, dir: &Path) -> Result<Vec<PathBuf>> {
        let report = serde_json::to_vec_pretty(&Value::Object(std::mem::take(&mut self.metrics)))?;
        self.files.push(("metrics.json".into(), report));
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut written = Vec::new();
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            if let Err(e) = std::fs::write(&path, bytes) {
                for p in &written {
                    let _ = std::fs::remove_file(p);
                }
                return Err(e).with_context(|| format!("writing {}", path.display()));
            }
            written.push(path);
        }
        Ok(written)
    }
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn vec_json(v: &DVector<f64>) -> Value {
    Value::Array(v.iter().map(|&x| finite_or_null(x)).collect())
}

fn node_columns(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|k| format!("{prefix}_{k}")).collect()
}

/// First recorded time after which `error` stays within `tol`.
fn settle_time(traj: &Trajectory<f64>, tol: f64, error: impl Fn(&[f64]) -> f64) -> Option<f64> {
    let mut samples: Vec<(f64, f64)> = traj.samples().map(|(t, x)| (t, error(x))).collect();
    if samples.last().map_or(true, |&(t, _)| t < traj.final_time) {
        samples.push((traj.final_time, error(&traj.final_state)));
    }
    let mut settled = None;
    for &(t, e) in samples.iter().rev() {
        if e <= tol {
            settled = Some(t);
        } else {
            break;
        }
    }
    settled
}

fn option_json(v: Option<f64>) -> Value {
    v.map_or(Value::Null, |x| json!(x))
}

pub fn execute(exp: &Experiment) -> Result<Artifacts> {
    let mut art = Artifacts::new(&exp.settings);
    match &exp.kind {
        ExperimentKind::Reduced(r) => reduced(&exp.settings, r, &mut art)?,
        ExperimentKind::Linearized(l) => linearized(&exp.settings, l, &mut art)?,
        ExperimentKind::Converter(c) => converter(&exp.settings, c, &mut art)?,
        ExperimentKind::Coherence(c) => coherence(&exp.settings, c, &mut art)?,
    }
    Ok(art)
}

fn reduced(s: &RunSettings, r: &ReducedExperiment, art: &mut Artifacts) -> Result<()> {
    let sys = &r.system;
    let n = sys.node_count();
    let ss = sys.induced_steady_state().context("induced steady state")?;
    let closed = sys.closed_loop(&r.controller);
    let traj = simulate("reduced", &closed, r.theta0.as_slice(), s.dt, s.horizon, &[], s.record_stride)?;
    art.csv("traj_reduced.csv", &traj, &node_columns("theta", n))?;

    let deviation = |x: &[f64]| {
        x.iter()
            .zip(ss.theta_s.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    };
    let final_theta = DVector::from_column_slice(&traj.final_state);
    let final_rate = sys.closed_loop_rhs(&final_theta, &r.controller);
    art.set("freq_error_final", json!(final_rate.amax()));
    art.set("settle_time_s", option_json(settle_time(&traj, r.settle_tolerance, deviation)));
    art.set("final_deviation", json!(deviation(&traj.final_state)));
    art.set("steady_state_theta", vec_json(&ss.theta_s));
    art.set("steady_state_residual", json!(ss.residual));
    art.set("newton_iterations", json!(ss.iterations));
    art.set("security_ok", json!(sys.graph().security_check(&ss.theta_s)));

    let angular = matches!(r.controller, angdroop::reduced::Controller::Angular);
    art.set("controller", json!(if angular { "angular" } else { "frequency" }));
    let values: Vec<f64> = traj
        .samples()
        .map(|(_, x)| sys.lyapunov_value(&ss, &DVector::from_column_slice(x)))
        .collect();
    art.set("value_initial", json!(values.first().copied().unwrap_or(0.0)));
    art.set("value_final", json!(sys.lyapunov_value(&ss, &final_theta)));
    if angular {
        let hjb = traj
            .samples()
            .map(|(_, x)| sys.hjb_residual(&ss, &DVector::from_column_slice(x)).abs())
            .fold(0.0f64, f64::max);
        art.set("hjb_residual_max", json!(hjb));
        let slack = 4.0 * f64::EPSILON * values.first().copied().unwrap_or(0.0).max(1.0);
        let monotone = values.windows(2).all(|w| w[1] <= w[0] + slack);
        art.set("value_nonincreasing", json!(monotone));
    }
    Ok(())
}

fn linear_dynamics(sys: &LinearizedSystem<f64>) -> FnDynamics<impl Fn(f64, &[f64], &mut [f64]) + '_> {
    FnDynamics::new(sys.state_dim(), move |_t: f64, x: &[f64], dx: &mut [f64]| {
        let out = sys.linear_rhs(&DVector::from_column_slice(x));
        dx.copy_from_slice(out.as_slice());
    })
}

/// Angle spread plus frequency magnitude; zero exactly on the consensus
/// manifold of either linearized loop.
fn linear_error(kind: DroopKind, n: usize, x: &[f64]) -> f64 {
    match kind {
        DroopKind::Angular => x[..n].iter().fold(0.0f64, |m, v| m.max(v.abs())),
        DroopKind::Frequency => {
            let mean = x[..n].iter().sum::<f64>() / n as f64;
            let spread = x[..n].iter().fold(0.0f64, |m, v| m.max((v - mean).abs()));
            x[n..].iter().fold(spread, |m, v| m.max(v.abs()))
        }
    }
}

fn linear_columns(kind: DroopKind, n: usize) -> Vec<String> {
    let mut cols = node_columns("theta", n);
    if kind == DroopKind::Frequency {
        cols.extend(node_columns("omega", n));
    }
    cols
}

/// Frequency deviation of a linearized state: `|theta'|_inf` for angular
/// droop, `|omega|_inf` for frequency droop.
fn linear_freq_error(sys: &LinearizedSystem<f64>, x: &[f64]) -> f64 {
    let n = sys.node_count();
    match sys.kind() {
        DroopKind::Angular => sys.linear_rhs(&DVector::from_column_slice(x)).amax(),
        DroopKind::Frequency => x[n..].iter().fold(0.0f64, |m, v| m.max(v.abs())),
    }
}

fn linearized(s: &RunSettings, l: &LinearizedExperiment, art: &mut Artifacts) -> Result<()> {
    let sys = &l.system;
    let n = sys.node_count();
    let kind = sys.kind();
    let dynamics = linear_dynamics(sys);
    let traj = simulate("linearized", &dynamics, l.x0.as_slice(), s.dt, s.horizon, &[], s.record_stride)?;
    art.csv("traj_linearized.csv", &traj, &linear_columns(kind, n))?;
    art.set("controller", json!(if kind == DroopKind::Angular { "angular" } else { "frequency" }));
    art.set("freq_error_final", json!(linear_freq_error(sys, &traj.final_state)));
    art.set(
        "settle_time_s",
        option_json(settle_time(&traj, l.settle_tolerance, |x| linear_error(kind, n, x))),
    );

    let (value, method) = match sys.coherence() {
        Ok(c) => (c.value, "closed_form"),
        Err(_) if sys.state_dim() <= ORACLE_MAX_DIM => (sys.coherence_oracle()?, "h2_oracle"),
        Err(e) => return Err(e).context("coherence of a large heterogeneous network"),
    };
    art.set("coherence_value", json!(value));
    art.set("coherence_method", json!(method));
    if let angdroop::linear::LinearGains::Angular { alpha, gamma } = sys.gains() {
        let ratio = alpha.iter().zip(gamma.iter()).map(|(a, g)| a / g).fold(0.0f64, f64::max);
        if alpha.iter().all(|&a| a == alpha[0]) && gamma.iter().all(|&g| g == gamma[0]) {
            art.set("bound", json!(ratio));
        }
    }
    if let Some((horizon, dt)) = l.stochastic {
        let est = empirical_coherence(sys, s.seed, horizon, dt)?;
        art.set("coherence_empirical", json!(est));
        art.set("coherence_empirical_rel_error", json!((est - value) / value));
    }
    Ok(())
}

fn converter(s: &RunSettings, c: &ConverterExperiment, art: &mut Artifacts) -> Result<()> {
    let op = nominal_power_reference(&c.params, c.pre_run_dt, c.pre_run_horizon).context("settling pre-run")?;
    let net = ConverterNetwork::new(c.params.clone(), c.events.clone(), op.p_hat_star.clone())?;
    let mut x0 = op.state.clone();
    x0.theta.copy_from(&c.theta0);
    let traj = net.simulate(&x0.to_vec(), s.dt, s.horizon, s.record_stride)?;
    let observed = traj.map(|t, x| net.observables(t, x));
    art.csv("traj_converter.csv", &observed, &net.observable_columns())?;

    let p = net.params();
    let lay = net.layout();
    let n = lay.n;
    let freq_error = |t: f64, x: &[f64]| -> Vec<f64> {
        net.frequencies(t, x).iter().map(|f| (f - p.omega_star).abs()).collect()
    };
    let final_err = freq_error(traj.final_time, &traj.final_state);
    art.set("freq_error_final", json!(final_err.iter().fold(0.0f64, |a, &b| a.max(b))));
    art.set("freq_error_final_per_converter", json!(final_err));
    let max_err = |t: f64, x: &[f64]| freq_error(t, x).into_iter().fold(0.0f64, f64::max);
    let settle = {
        let mut settled = None;
        let mut samples: Vec<(f64, f64)> = traj.samples().map(|(t, x)| (t, max_err(t, x))).collect();
        samples.push((traj.final_time, max_err(traj.final_time, &traj.final_state)));
        for &(t, e) in samples.iter().rev() {
            if e <= c.freq_tolerance {
                settled = Some(t);
            } else {
                break;
            }
        }
        settled
    };
    art.set("settle_time_s", option_json(settle));
    art.set("freq_tolerance", json!(c.freq_tolerance));
    art.set("p_hat_star", vec_json(&op.p_hat_star));
    art.set("pre_run_drift", json!(op.drift));

    let vdc = lay.v_dc();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, x) in traj.samples() {
        for &v in &x[vdc..vdc + n] {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    art.set("v_dc_min", json!(lo));
    art.set("v_dc_max", json!(hi));
    art.set(
        "v_dc_within_envelope",
        json!(lo > 0.5 * p.v_dc_star && hi < 1.5 * p.v_dc_star),
    );

    let offsets = |t: f64, x: &[f64]| -> Vec<f64> {
        (0..n).map(|k| x[lay.theta() + k] - p.nominal_angle(k, t)).collect()
    };
    let at = |t: f64| -> (f64, Vec<f64>) {
        let i = traj
            .times
            .iter()
            .rposition(|&tt| tt < t - 1e-12)
            .unwrap_or(0);
        (traj.times[i], offsets(traj.times[i], &traj.states[i]))
    };
    let mut events = Vec::new();
    for ev in &c.events {
        let (t_pre, pre) = at(ev.t_on);
        let (t_end, during) = at(ev.t_off);
        let shift: Vec<f64> = pre.iter().zip(&during).map(|(a, b)| b - a).collect();
        events.push(json!({
            "node": ev.node,
            "delta_G": ev.delta_g,
            "t_on": ev.t_on,
            "t_off": ev.t_off,
            "offset_before": pre,
            "offset_before_t": t_pre,
            "offset_event_end": during,
            "offset_event_end_t": t_end,
            "offset_shift": shift,
        }));
    }
    art.set("events", Value::Array(events));
    art.set("angle_offset_final", json!(offsets(traj.final_time, &traj.final_state)));
    art.set("event_log", json!(traj.meta.event_log));
    Ok(())
}

struct SizeResult {
    row: angdroop::linear::CoherenceRow,
    files: Vec<(String, Vec<u8>)>,
    transient: Value,
}

fn coherence_size(s: &RunSettings, c: &CoherenceExperiment, n: usize) -> Result<SizeResult> {
    let graph = c.family.build(n, c.susceptance)?;
    let row = coherence_row(&graph, c.alpha, c.gamma, c.damping)?;
    let mut files = Vec::new();
    let mut transient = Map::new();
    if c.transient {
        // Seed depends on the size only, so results do not depend on the
        // order in which sizes are processed.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(s.seed ^ (n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let theta0: Vec<f64> = (0..n)
            .map(|_| if c.perturbation > 0.0 { rng.random_range(-c.perturbation..c.perturbation) } else { 0.0 })
            .collect();
        let systems = [
            ("angular", LinearizedSystem::uniform_angular(graph.clone(), c.alpha, c.gamma)?),
            ("frequency", LinearizedSystem::uniform_frequency(graph, c.inertia, c.damping)?),
        ];
        for (label, sys) in &systems {
            let mut x0 = vec![0.0; sys.state_dim()];
            x0[..n].copy_from_slice(&theta0);
            let dynamics = linear_dynamics(sys);
            let traj = simulate(label, &dynamics, &x0, s.dt, s.horizon, &[], s.record_stride)?;
            let mut buf = Vec::new();
            traj.write_csv(&mut buf, &linear_columns(sys.kind(), n))?;
            files.push((format!("traj_{label}_n{n}.csv"), buf));
            transient.insert(
                (*label).into(),
                json!({
                    "freq_error_final": linear_freq_error(sys, &traj.final_state),
                    "final_error": linear_error(sys.kind(), n, &traj.final_state),
                }),
            );
        }
    }
    Ok(SizeResult {
        row,
        files,
        transient: Value::Object(transient),
    })
}

fn coherence(s: &RunSettings, c: &CoherenceExperiment, art: &mut Artifacts) -> Result<()> {
    // Sizes are independent; run them concurrently and merge in size order.
    let results: Vec<Result<SizeResult>> = std::thread::scope(|scope| {
        let handles: Vec<_> = c
            .sizes
            .iter()
            .map(|&n| scope.spawn(move || coherence_size(s, c, n)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(anyhow::anyhow!("worker panicked"))))
            .collect()
    });
    let mut rows = Vec::new();
    let mut per_size = Vec::new();
    for (res, &n) in results.into_iter().zip(&c.sizes) {
        let res = res.with_context(|| format!("coherence study at n = {n}"))?;
        art.files.extend(res.files);
        per_size.push(json!({
            "n": n,
            "lambda2": res.row.lambda2,
            "coherence_angular": res.row.coherence_angular,
            "coherence_frequency": res.row.coherence_frequency,
            "transient": res.transient,
        }));
        rows.push(res.row);
    }
    let mut buf = Vec::new();
    write_coherence_csv(&mut buf, &rows)?;
    art.files.insert(0, ("coherence.csv".into(), buf));

    let largest = rows.last().expect("at least one size");
    art.set("coherence_value", json!(largest.coherence_angular));
    art.set("coherence_frequency_value", json!(largest.coherence_frequency));
    art.set("bound", json!(c.alpha / c.gamma));
    art.set(
        "angular_below_bound",
        json!(rows.iter().all(|r| r.coherence_angular < r.bound_alpha_over_gamma)),
    );
    art.set(
        "frequency_increasing",
        json!(rows.windows(2).all(|w| w[1].coherence_frequency > w[0].coherence_frequency)),
    );
    art.set("family", json!(c.family.name()));
    art.set("sizes", Value::Array(per_size));
    if c.transient {
        let worst = art.metrics["sizes"]
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(|v| v["transient"]["angular"]["freq_error_final"].as_f64())
            .fold(0.0f64, f64::max);
        art.set("freq_error_final", json!(worst));
    }
    Ok(())
}
