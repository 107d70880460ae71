//! Scenario files: parsing, command-line overrides, and validation into a
//! typed experiment description.
//!
//! Everything that can be rejected is rejected here, before a run starts or
//! any output exists.

use std::fmt;
use std::path::Path;

use angdroop::converter::{
    ConverterNetworkParams, LoadEvent, DEFAULT_LOAD_STEP, TESTCASE_THETA0, TESTCASE_THETA_STAR0,
};
use angdroop::linear::{DroopKind, LinearizedSystem};
use angdroop::netgraph::{GraphFamily, NetworkGraph};
use angdroop::reduced::{Controller, ReducedSystem};
use nalgebra::DVector;
use serde::Deserialize;
use serde_json::Value;

/// Built-in scenarios, `(name, description, json)`.
pub const BUILTIN: &[(&str, &str, &str)] = &[
    (
        "testcase1",
        "three converters on a ring, reference parameters, load step at converter 1 during [0.3, 0.7) s",
        include_str!("../scenarios/testcase1.json"),
    ),
    (
        "testcase2",
        "path networks n = 10 and n = 100, linearized angular vs frequency droop coherence and transients",
        include_str!("../scenarios/testcase2.json"),
    ),
    (
        "reduced_ring",
        "reduced angle model on a 3-ring with a constant disturbance, angular droop",
        include_str!("../scenarios/reduced_ring.json"),
    ),
    (
        "linearized_path",
        "linearized angular droop on a 5-node path with a Monte-Carlo coherence estimate",
        include_str!("../scenarios/linearized_path.json"),
    ),
];

/// A rejected scenario: the offending field, an explanation, and the source
/// line when it can be located.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioError {
    pub source: String,
    pub line: Option<usize>,
    pub field: Option<String>,
    pub message: String,
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.source)?;
        if let Some(line) = self.line {
            write!(f, ":{line}")?;
        }
        write!(f, ": ")?;
        if let Some(field) = &self.field {
            write!(f, "field `{field}`: ")?;
        }
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for ScenarioError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Reduced,
    Linearized,
    Converter,
    CoherenceStudy,
}

impl Model {
    pub fn name(self) -> &'static str {
        match self {
            Model::Reduced => "reduced",
            Model::Linearized => "linearized",
            Model::Converter => "converter",
            Model::CoherenceStudy => "coherence_study",
        }
    }
}

/// A per-node quantity given either as one shared value or per node.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum PerNode {
    Uniform(f64),
    Each(Vec<f64>),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub family: Option<String>,
    pub n: Option<usize>,
    pub susceptance: Option<f64>,
    /// Explicit `[k, j, b]` lines; overrides `family`.
    pub lines: Option<Vec<(usize, usize, f64)>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSpec {
    pub alpha: Option<PerNode>,
    pub gamma: Option<PerNode>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    /// Initial angles (absolute for `reduced`/`converter`, deviations for
    /// `linearized`).
    pub theta: Option<Vec<f64>>,
    /// Otherwise: uniform random offsets of at most this size, drawn from
    /// the scenario seed.
    pub perturbation: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub node: usize,
    #[serde(rename = "delta_G", default = "default_load_step")]
    pub delta_g: f64,
    pub t_on: f64,
    pub t_off: f64,
}

fn default_load_step() -> f64 {
    DEFAULT_LOAD_STEP
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConverterSpec {
    pub c_dc: Option<f64>,
    pub k_p: Option<f64>,
    pub v_dc_star: Option<f64>,
    pub i_dc_star: Option<PerNode>,
    pub r_ac: Option<f64>,
    pub l_ac: Option<f64>,
    pub c_ac: Option<f64>,
    pub g_ac: Option<f64>,
    pub r_line: Option<f64>,
    pub l_line: Option<f64>,
    pub amplitude: Option<f64>,
    pub omega_star: Option<f64>,
    pub theta_star0: Option<Vec<f64>>,
    pub pre_run_horizon: Option<f64>,
    pub pre_run_dt: Option<f64>,
    pub freq_tolerance: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    #[default]
    Angular,
    Frequency,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReducedSpec {
    pub controller: Option<ControllerKind>,
    pub damping: Option<PerNode>,
    pub theta_star0: Option<Vec<f64>>,
    pub p_dist: Option<Vec<f64>>,
    pub omega_star: Option<f64>,
    pub settle_tolerance: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StochasticSpec {
    pub horizon: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearizedSpec {
    pub controller: Option<ControllerKind>,
    pub inertia: Option<PerNode>,
    pub damping: Option<PerNode>,
    pub stochastic: Option<StochasticSpec>,
    pub settle_tolerance: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoherenceSpec {
    pub sizes: Option<Vec<usize>>,
    pub family: Option<String>,
    pub susceptance: Option<f64>,
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
    pub damping: Option<f64>,
    pub inertia: Option<f64>,
    pub transient: Option<bool>,
    pub perturbation: Option<f64>,
}

/// Raw scenario file contents.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: Option<String>,
    pub description: Option<String>,
    pub model: Model,
    #[serde(default)]
    pub graph: GraphSpec,
    #[serde(default)]
    pub gains: GainSpec,
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
    pub record_stride: Option<usize>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default)]
    pub events: Vec<EventSpec>,
    #[serde(default)]
    pub converter: ConverterSpec,
    #[serde(default)]
    pub reduced: ReducedSpec,
    #[serde(default)]
    pub linearized: LinearizedSpec,
    #[serde(default)]
    pub coherence: CoherenceSpec,
    pub output: Option<String>,
}

/// One `--set key=value` override.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: Value,
}

impl Override {
    /// Parses `key=value`; the value is read as JSON when it parses as such,
    /// otherwise as a plain string.
    pub fn parse(spec: &str) -> Result<Self, String> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| format!("override `{spec}` is not of the form key=value"))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(format!("override `{spec}` has an empty key segment"));
        }
        let raw = raw.trim();
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        Ok(Self {
            key: key.to_string(),
            value,
        })
    }

    fn apply(&self, root: &mut Value) -> Result<(), String> {
        let mut node = root;
        let segments: Vec<&str> = self.key.split('.').collect();
        for (depth, seg) in segments.iter().enumerate() {
            let last = depth + 1 == segments.len();
            match node {
                Value::Object(map) => {
                    if last {
                        map.insert(seg.to_string(), self.value.clone());
                        return Ok(());
                    }
                    node = map
                        .entry(seg.to_string())
                        .or_insert_with(|| Value::Object(Default::default()));
                }
                Value::Array(items) => {
                    let idx: usize = seg
                        .parse()
                        .map_err(|_| format!("`{seg}` is not an index into an array"))?;
                    let len = items.len();
                    let slot = items
                        .get_mut(idx)
                        .ok_or_else(|| format!("index {idx} out of range (length {len})"))?;
                    if last {
                        *slot = self.value.clone();
                        return Ok(());
                    }
                    node = slot;
                }
                _ => return Err(format!("`{seg}` does not name a nested section")),
            }
        }
        Ok(())
    }
}

/// Source text of a scenario, resolved from a file path or a built-in name.
#[derive(Debug, Clone)]
pub struct ScenarioSource {
    pub label: String,
    pub text: String,
}

impl ScenarioSource {
    pub fn load(spec: &str) -> Result<Self, ScenarioError> {
        let path = Path::new(spec);
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| ScenarioError {
                source: spec.to_string(),
                line: None,
                field: None,
                message: format!("cannot read scenario: {e}"),
            })?;
            return Ok(Self {
                label: spec.to_string(),
                text,
            });
        }
        match BUILTIN.iter().find(|(name, _, _)| *name == spec) {
            Some((name, _, text)) => Ok(Self {
                label: format!("builtin:{name}"),
                text: text.to_string(),
            }),
            None => Err(ScenarioError {
                source: spec.to_string(),
                line: None,
                field: None,
                message: format!(
                    "no such file or built-in scenario (built-ins: {})",
                    BUILTIN.iter().map(|b| b.0).collect::<Vec<_>>().join(", ")
                ),
            }),
        }
    }

    fn error(&self, line: Option<usize>, field: Option<&str>, message: impl Into<String>) -> ScenarioError {
        ScenarioError {
            source: self.label.clone(),
            line,
            field: field.map(str::to_string),
            message: message.into(),
        }
    }

    /// Line of the first occurrence of `"key"` for the last segment of a
    /// dotted field name.
    fn locate(&self, field: &str) -> Option<usize> {
        let key = field.rsplit('.').next()?;
        let key = key.split('[').next()?;
        let needle = format!("\"{key}\"");
        self.text
            .lines()
            .position(|line| line.contains(&needle))
            .map(|i| i + 1)
    }

    fn field_error(&self, field: &str, message: impl Into<String>) -> ScenarioError {
        self.error(self.locate(field), Some(field), message)
    }

    /// Parses the text, applies overrides, and validates the result.
    pub fn resolve(&self, overrides: &[Override]) -> Result<Experiment, ScenarioError> {
        let mut value: Value = serde_json::from_str(&self.text)
            .map_err(|e| self.error(Some(e.line()), None, format!("invalid JSON: {e}")))?;
        // A first typed pass against the original text keeps line numbers.
        serde_json::from_str::<ScenarioFile>(&self.text)
            .map_err(|e| self.error(Some(e.line()), None, strip_position(&e.to_string())))?;
        for ov in overrides {
            ov.apply(&mut value)
                .map_err(|m| self.error(None, Some(&ov.key), format!("cannot apply override: {m}")))?;
        }
        let file: ScenarioFile = serde_json::from_value(value).map_err(|e| {
            self.error(None, None, format!("after overrides: {}", strip_position(&e.to_string())))
        })?;
        Experiment::build(self, file, overrides)
    }
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(idx) => msg[..idx].to_string(),
        None => msg.to_string(),
    }
}

/// Common run settings.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub name: String,
    pub description: Option<String>,
    pub model: Model,
    pub dt: f64,
    pub horizon: f64,
    pub record_stride: usize,
    pub seed: u64,
    pub output: Option<String>,
    pub overrides: Vec<Override>,
}

#[derive(Debug, Clone)]
pub struct ReducedExperiment {
    pub system: ReducedSystem<f64>,
    pub controller: Controller<f64>,
    pub theta0: DVector<f64>,
    pub settle_tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct LinearizedExperiment {
    pub system: LinearizedSystem<f64>,
    pub x0: DVector<f64>,
    pub stochastic: Option<(f64, f64)>,
    pub settle_tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct ConverterExperiment {
    pub params: ConverterNetworkParams<f64>,
    pub events: Vec<LoadEvent<f64>>,
    pub theta0: DVector<f64>,
    pub pre_run_horizon: f64,
    pub pre_run_dt: f64,
    pub freq_tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct CoherenceExperiment {
    pub family: GraphFamily,
    pub sizes: Vec<usize>,
    pub susceptance: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub damping: f64,
    pub inertia: f64,
    pub transient: bool,
    pub perturbation: f64,
}

#[derive(Debug, Clone)]
pub enum ExperimentKind {
    Reduced(ReducedExperiment),
    Linearized(LinearizedExperiment),
    Converter(ConverterExperiment),
    Coherence(CoherenceExperiment),
}

/// A fully validated experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub settings: RunSettings,
    pub kind: ExperimentKind,
}

fn positive(src: &ScenarioSource, field: &str, v: f64) -> Result<f64, ScenarioError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(src.field_error(field, format!("must be finite and positive, got {v}")))
    }
}

fn per_node(
    src: &ScenarioSource,
    field: &str,
    spec: Option<&PerNode>,
    default: f64,
    n: usize,
    require_positive: bool,
) -> Result<DVector<f64>, ScenarioError> {
    let v = match spec {
        None => DVector::from_element(n, default),
        Some(PerNode::Uniform(x)) => DVector::from_element(n, *x),
        Some(PerNode::Each(xs)) => {
            if xs.len() != n {
                return Err(src.field_error(
                    field,
                    format!("expected {n} entries (one per node), got {}", xs.len()),
                ));
            }
            DVector::from_column_slice(xs)
        }
    };
    for (i, &x) in v.iter().enumerate() {
        let bad = !x.is_finite() || (require_positive && x <= 0.0);
        if bad {
            let what = if require_positive { "finite and positive" } else { "finite" };
            return Err(src.field_error(field, format!("entry {i} must be {what}, got {x}")));
        }
    }
    Ok(v)
}

fn vector(
    src: &ScenarioSource,
    field: &str,
    spec: Option<&Vec<f64>>,
    n: usize,
) -> Result<Option<DVector<f64>>, ScenarioError> {
    match spec {
        None => Ok(None),
        Some(xs) if xs.len() != n => Err(src.field_error(
            field,
            format!("expected {n} entries (one per node), got {}", xs.len()),
        )),
        Some(xs) => match xs.iter().position(|x| !x.is_finite()) {
            Some(i) => Err(src.field_error(field, format!("entry {i} must be finite"))),
            None => Ok(Some(DVector::from_column_slice(xs))),
        },
    }
}

fn family(src: &ScenarioSource, field: &str, name: Option<&str>, default: GraphFamily) -> Result<GraphFamily, ScenarioError> {
    match name {
        None => Ok(default),
        Some(s) => s.parse().map_err(|_| {
            src.field_error(field, format!("unknown graph family `{s}` (path, ring, complete)"))
        }),
    }
}

fn build_graph(
    src: &ScenarioSource,
    spec: &GraphSpec,
    default_n: usize,
) -> Result<NetworkGraph<f64>, ScenarioError> {
    let b = positive(src, "graph.susceptance", spec.susceptance.unwrap_or(1.0))?;
    let result = match &spec.lines {
        Some(lines) => {
            let n = spec.n.ok_or_else(|| src.field_error("graph.n", "required with explicit lines"))?;
            NetworkGraph::new(n, lines.iter().copied())
        }
        None => {
            let fam = family(src, "graph.family", spec.family.as_deref(), GraphFamily::Ring)?;
            fam.build(spec.n.unwrap_or(default_n), b)
        }
    };
    result.map_err(|e| {
        let field = if spec.lines.is_some() { "graph.lines" } else { "graph.n" };
        src.field_error(field, e.to_string())
    })
}

fn random_offsets(seed: u64, n: usize, size: f64) -> DVector<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(n, |_, _| if size > 0.0 { rng.random_range(-size..size) } else { 0.0 })
}

fn stride(src: &ScenarioSource, v: Option<usize>, default: usize) -> Result<usize, ScenarioError> {
    match v.unwrap_or(default) {
        0 => Err(src.field_error("record_stride", "must be at least 1")),
        s => Ok(s),
    }
}

impl Experiment {
    fn build(src: &ScenarioSource, file: ScenarioFile, overrides: &[Override]) -> Result<Self, ScenarioError> {
        let model = file.model;
        let (dt_default, horizon_default, stride_default) = match model {
            Model::Converter => (1e-7, 1.0, 100),
            Model::Reduced => (1e-4, 20.0, 100),
            Model::Linearized => (1e-3, 20.0, 10),
            Model::CoherenceStudy => (1e-2, 30.0, 10),
        };
        let dt = positive(src, "dt", file.dt.unwrap_or(dt_default))?;
        let horizon = positive(src, "horizon", file.horizon.unwrap_or(horizon_default))?;
        if horizon < dt {
            return Err(src.field_error("horizon", format!("shorter than one step (dt = {dt})")));
        }
        let settings = RunSettings {
            name: file.name.clone().unwrap_or_else(|| src.label.clone()),
            description: file.description.clone(),
            model,
            dt,
            horizon,
            record_stride: stride(src, file.record_stride, stride_default)?,
            seed: file.seed.unwrap_or(0),
            output: file.output.clone(),
            overrides: overrides.to_vec(),
        };
        if model != Model::Converter && !file.events.is_empty() {
            return Err(src.field_error("events", "load events apply to the converter model only"));
        }
        let kind = match model {
            Model::Reduced => ExperimentKind::Reduced(reduced(src, &file, settings.seed)?),
            Model::Linearized => ExperimentKind::Linearized(linearized(src, &file, settings.seed)?),
            Model::Converter => ExperimentKind::Converter(converter(src, &file, dt, horizon)?),
            Model::CoherenceStudy => ExperimentKind::Coherence(coherence(src, &file)?),
        };
        Ok(Self { settings, kind })
    }
}

fn reduced(src: &ScenarioSource, file: &ScenarioFile, seed: u64) -> Result<ReducedExperiment, ScenarioError> {
    let graph = build_graph(src, &file.graph, 3)?;
    let n = graph.node_count();
    let spec = &file.reduced;
    let alpha = per_node(src, "gains.alpha", file.gains.alpha.as_ref(), 0.5, n, true)?;
    let gamma = per_node(src, "gains.gamma", file.gains.gamma.as_ref(), 1.0, n, true)?;
    let theta_star0 = vector(src, "reduced.theta_star0", spec.theta_star0.as_ref(), n)?
        .unwrap_or_else(|| DVector::zeros(n));
    let p_dist = vector(src, "reduced.p_dist", spec.p_dist.as_ref(), n)?.unwrap_or_else(|| DVector::zeros(n));
    let omega_star = spec.omega_star.unwrap_or(2.0 * std::f64::consts::PI * 50.0);
    if !omega_star.is_finite() {
        return Err(src.field_error("reduced.omega_star", "must be finite"));
    }
    let controller = match spec.controller.unwrap_or_default() {
        ControllerKind::Angular => Controller::Angular,
        ControllerKind::Frequency => Controller::Frequency(per_node(
            src,
            "reduced.damping",
            spec.damping.as_ref(),
            1.0,
            n,
            true,
        )?),
    };
    let system = ReducedSystem::new(graph, alpha, gamma, theta_star0.clone(), omega_star, p_dist)
        .map_err(|e| src.field_error("gains", e.to_string()))?;
    let theta0 = match vector(src, "initial.theta", file.initial.theta.as_ref(), n)? {
        Some(t) => t,
        None => &theta_star0 + random_offsets(seed, n, file.initial.perturbation.unwrap_or(0.1)),
    };
    let settle_tolerance = positive(src, "reduced.settle_tolerance", spec.settle_tolerance.unwrap_or(1e-6))?;
    Ok(ReducedExperiment {
        system,
        controller,
        theta0,
        settle_tolerance,
    })
}

fn linearized(src: &ScenarioSource, file: &ScenarioFile, seed: u64) -> Result<LinearizedExperiment, ScenarioError> {
    let graph = build_graph(src, &file.graph, 3)?;
    let n = graph.node_count();
    let spec = &file.linearized;
    let system = match spec.controller.unwrap_or_default() {
        ControllerKind::Angular => {
            let alpha = per_node(src, "gains.alpha", file.gains.alpha.as_ref(), 1.0, n, true)?;
            let gamma = per_node(src, "gains.gamma", file.gains.gamma.as_ref(), 1.0, n, true)?;
            LinearizedSystem::angular(graph, alpha, gamma)
        }
        ControllerKind::Frequency => {
            let m = per_node(src, "linearized.inertia", spec.inertia.as_ref(), 1.0, n, true)?;
            let d = per_node(src, "linearized.damping", spec.damping.as_ref(), 1.0, n, true)?;
            LinearizedSystem::frequency(graph, m, d)
        }
    }
    .map_err(|e| src.field_error("gains", e.to_string()))?;
    let theta = match vector(src, "initial.theta", file.initial.theta.as_ref(), n)? {
        Some(t) => t,
        None => random_offsets(seed, n, file.initial.perturbation.unwrap_or(0.1)),
    };
    let mut x0 = DVector::zeros(system.state_dim());
    x0.rows_mut(0, n).copy_from(&theta);
    let stochastic = match &spec.stochastic {
        None => None,
        Some(s) => {
            let h = positive(src, "linearized.stochastic.horizon", s.horizon)?;
            let dt = positive(src, "linearized.stochastic.dt", s.dt)?;
            if h <= dt {
                return Err(src.field_error("linearized.stochastic.horizon", "must exceed dt"));
            }
            Some((h, dt))
        }
    };
    if system.kind() == DroopKind::Frequency && file.gains.alpha.is_some() {
        return Err(src.field_error("gains.alpha", "frequency droop takes linearized.inertia/damping, not alpha"));
    }
    let settle_tolerance = positive(src, "linearized.settle_tolerance", spec.settle_tolerance.unwrap_or(1e-6))?;
    Ok(LinearizedExperiment {
        system,
        x0,
        stochastic,
        settle_tolerance,
    })
}

fn converter(src: &ScenarioSource, file: &ScenarioFile, dt: f64, horizon: f64) -> Result<ConverterExperiment, ScenarioError> {
    let graph = build_graph(src, &file.graph, 3)?;
    let n = graph.node_count();
    let spec = &file.converter;
    let mut p = ConverterNetworkParams::defaults(graph);
    let scalars: [(&str, Option<f64>, &mut f64); 11] = [
        ("converter.c_dc", spec.c_dc, &mut p.c_dc),
        ("converter.k_p", spec.k_p, &mut p.k_p),
        ("converter.v_dc_star", spec.v_dc_star, &mut p.v_dc_star),
        ("converter.r_ac", spec.r_ac, &mut p.r_ac),
        ("converter.l_ac", spec.l_ac, &mut p.l_ac),
        ("converter.c_ac", spec.c_ac, &mut p.c_ac),
        ("converter.g_ac", spec.g_ac, &mut p.g_ac),
        ("converter.r_line", spec.r_line, &mut p.r_line),
        ("converter.l_line", spec.l_line, &mut p.l_line),
        ("converter.amplitude", spec.amplitude, &mut p.amplitude),
        ("converter.omega_star", spec.omega_star, &mut p.omega_star),
    ];
    for (field, given, slot) in scalars {
        if let Some(v) = given {
            *slot = positive(src, field, v)?;
        }
    }
    if !(p.amplitude < 1.0) {
        return Err(src.field_error("converter.amplitude", format!("must lie in (0, 1), got {}", p.amplitude)));
    }
    p.i_dc_star = per_node(src, "converter.i_dc_star", spec.i_dc_star.as_ref(), 500.0, n, false)?;
    p.alpha = per_node(src, "gains.alpha", file.gains.alpha.as_ref(), 0.5, n, true)?;
    p.gamma = per_node(src, "gains.gamma", file.gains.gamma.as_ref(), 1e6, n, true)?;
    let default_star = if n == 3 {
        DVector::from_column_slice(&TESTCASE_THETA_STAR0)
    } else {
        DVector::zeros(n)
    };
    p.theta_star0 = vector(src, "converter.theta_star0", spec.theta_star0.as_ref(), n)?.unwrap_or(default_star);
    if let Some((k, j, d)) = p.graph.security_violation(&p.theta_star0) {
        return Err(src.field_error(
            "converter.theta_star0",
            format!("nominal angle difference {d} across line ({k}, {j}) violates |diff| < pi/2"),
        ));
    }
    p.validate().map_err(|e| src.field_error("converter", e.to_string()))?;

    let mut events = Vec::with_capacity(file.events.len());
    for (i, ev) in file.events.iter().enumerate() {
        let le = LoadEvent {
            node: ev.node,
            delta_g: ev.delta_g,
            t_on: ev.t_on,
            t_off: ev.t_off,
        };
        le.validate(n)
            .map_err(|e| src.field_error(&format!("events[{i}]"), e.to_string()))?;
        events.push(le);
    }
    let default_theta0 = if n == 3 && spec.theta_star0.is_none() {
        DVector::from_column_slice(&TESTCASE_THETA0)
    } else {
        p.theta_star0.clone()
    };
    let theta0 = vector(src, "initial.theta", file.initial.theta.as_ref(), n)?.unwrap_or(default_theta0);
    let pre_run_horizon = positive(src, "converter.pre_run_horizon", spec.pre_run_horizon.unwrap_or(0.05))?;
    let pre_run_dt = positive(src, "converter.pre_run_dt", spec.pre_run_dt.unwrap_or(dt))?;
    let freq_tolerance = positive(src, "converter.freq_tolerance", spec.freq_tolerance.unwrap_or(1e-2))?;
    let _ = horizon;
    Ok(ConverterExperiment {
        params: p,
        events,
        theta0,
        pre_run_horizon,
        pre_run_dt,
        freq_tolerance,
    })
}

fn coherence(src: &ScenarioSource, file: &ScenarioFile) -> Result<CoherenceExperiment, ScenarioError> {
    let spec = &file.coherence;
    let sizes = spec.sizes.clone().unwrap_or_else(|| vec![10, 100]);
    if sizes.is_empty() {
        return Err(src.field_error("coherence.sizes", "needs at least one network size"));
    }
    if let Some(&bad) = sizes.iter().find(|&&n| n < 2) {
        return Err(src.field_error("coherence.sizes", format!("network size {bad} must be at least 2")));
    }
    let mut sorted = sizes;
    sorted.sort_unstable();
    sorted.dedup();
    Ok(CoherenceExperiment {
        family: family(src, "coherence.family", spec.family.as_deref(), GraphFamily::Path)?,
        sizes: sorted,
        susceptance: positive(src, "coherence.susceptance", spec.susceptance.unwrap_or(1.0))?,
        alpha: positive(src, "coherence.alpha", spec.alpha.unwrap_or(1.0))?,
        gamma: positive(src, "coherence.gamma", spec.gamma.unwrap_or(1.0))?,
        damping: positive(src, "coherence.damping", spec.damping.unwrap_or(1.0))?,
        inertia: positive(src, "coherence.inertia", spec.inertia.unwrap_or(1.0))?,
        transient: spec.transient.unwrap_or(true),
        perturbation: {
            let p = spec.perturbation.unwrap_or(0.1);
            if !(p >= 0.0) || !p.is_finite() {
                return Err(src.field_error("coherence.perturbation", "must be finite and non-negative"));
            }
            p
        },
    })
}
