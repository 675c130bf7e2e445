//! TOML configuration files: system models and experiment definitions.
//!
//! Two file kinds share `schema_version = 1`:
//!
//! * a system file describing buses, branches, and generators (with optional
//!   nested `avr` and `pss` tables), loaded into a [`SystemModel`];
//! * an experiment file naming a system file plus everything one run needs:
//!   integrator settings, an event schedule, a reference signal (imported
//!   from CSV or regenerated from ground-truth overrides), the loss, the
//!   optimizer settings, and the parameters to adjust.
//!
//! Parsing is strict (`deny_unknown_fields`), so typos surface as errors
//! naming the offending key rather than silently applying defaults.

use crate::models::{GenParams, SexsParams, Stab1Params};
use crate::simulator::{
    Branch, Event, EventAction, EventSchedule, GeneratorSpec, SimError, SystemModel, DEFAULT_DT,
};
use num_complex::Complex64;
use serde::Deserialize;
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug)]
pub enum ConfigError {
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// TOML syntax or unknown-key failure; message carries key and position.
    Parse {
        path: PathBuf,
        message: String,
    },
    /// Parsed fine but violates an invariant; message names the key.
    Invalid {
        path: PathBuf,
        message: String,
    },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io { path, source } => {
                write!(f, "cannot read {}: {source}", path.display())
            }
            ConfigError::Parse { path, message } => {
                write!(f, "cannot parse {}: {message}", path.display())
            }
            ConfigError::Invalid { path, message } => {
                write!(f, "invalid configuration in {}: {message}", path.display())
            }
        }
    }
}

impl std::error::Error for ConfigError {}

fn invalid(path: &Path, message: String) -> ConfigError {
    ConfigError::Invalid {
        path: path.to_path_buf(),
        message,
    }
}

// ---------------------------------------------------------------------------
// System file
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemFile {
    schema_version: u32,
    system: SystemHeader,
    #[serde(default)]
    bus: Vec<BusEntry>,
    #[serde(default)]
    branch: Vec<BranchEntry>,
    #[serde(default)]
    generator: Vec<GeneratorEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemHeader {
    f_hz: f64,
    s_base_mva: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusEntry {
    name: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchEntry {
    from: String,
    to: String,
    #[serde(default)]
    r: f64,
    x: f64,
    #[serde(default)]
    b_shunt: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratorEntry {
    name: String,
    bus: String,
    s_n_mva: f64,
    v_setpoint: f64,
    p_setpoint_mw: Option<f64>,
    #[serde(default)]
    slack: bool,
    #[serde(rename = "H")]
    h: f64,
    #[serde(rename = "D", default)]
    d: f64,
    #[serde(rename = "X_d")]
    x_d: f64,
    #[serde(rename = "X_q")]
    x_q: f64,
    #[serde(rename = "X_d_t")]
    x_d_t: f64,
    #[serde(rename = "X_q_t")]
    x_q_t: f64,
    #[serde(rename = "X_d_st")]
    x_d_st: f64,
    #[serde(rename = "X_q_st")]
    x_q_st: f64,
    #[serde(rename = "T_d0_t")]
    t_d0_t: f64,
    #[serde(rename = "T_q0_t")]
    t_q0_t: f64,
    #[serde(rename = "T_d0_st")]
    t_d0_st: f64,
    #[serde(rename = "T_q0_st")]
    t_q0_st: f64,
    avr: Option<AvrEntry>,
    pss: Option<PssEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AvrEntry {
    #[serde(rename = "K")]
    k: Option<f64>,
    #[serde(rename = "T_a")]
    t_a: Option<f64>,
    #[serde(rename = "T_b")]
    t_b: Option<f64>,
    #[serde(rename = "T_e")]
    t_e: Option<f64>,
    #[serde(rename = "E_min")]
    e_min: Option<f64>,
    #[serde(rename = "E_max")]
    e_max: Option<f64>,
    #[serde(rename = "V_ref")]
    v_ref: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PssEntry {
    #[serde(rename = "K")]
    k: Option<f64>,
    #[serde(rename = "T_w")]
    t_w: Option<f64>,
    #[serde(rename = "T_1")]
    t_1: Option<f64>,
    #[serde(rename = "T_2")]
    t_2: Option<f64>,
    #[serde(rename = "T_3")]
    t_3: Option<f64>,
    #[serde(rename = "T_4")]
    t_4: Option<f64>,
    #[serde(rename = "H_lim")]
    h_lim: Option<f64>,
}

fn read_toml_str(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn check_schema_version(path: &Path, version: u32) -> Result<(), ConfigError> {
    if version != SCHEMA_VERSION {
        return Err(invalid(
            path,
            format!("schema_version = {version} is not supported (expected {SCHEMA_VERSION})"),
        ));
    }
    Ok(())
}

/// Loads and validates a system model file.
pub fn load_system(path: &Path) -> Result<SystemModel, ConfigError> {
    let text = read_toml_str(path)?;
    let file: SystemFile = toml::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    check_schema_version(path, file.schema_version)?;

    let bus_names: Vec<String> = file.bus.iter().map(|b| b.name.clone()).collect();
    let bus_index = |name: &str, key: &str| -> Result<usize, ConfigError> {
        bus_names
            .iter()
            .position(|b| b == name)
            .ok_or_else(|| invalid(path, format!("{key} = {name:?} names no [[bus]] entry")))
    };

    let mut branches = Vec::with_capacity(file.branch.len());
    for (i, b) in file.branch.iter().enumerate() {
        branches.push(Branch {
            from: bus_index(&b.from, &format!("branch[{i}].from"))?,
            to: bus_index(&b.to, &format!("branch[{i}].to"))?,
            r: b.r,
            x: b.x,
            b_shunt: b.b_shunt,
        });
    }

    let mut generators = Vec::with_capacity(file.generator.len());
    for g in &file.generator {
        let params = GenParams {
            h: g.h,
            d: g.d,
            x_d: g.x_d,
            x_q: g.x_q,
            x_d_t: g.x_d_t,
            x_q_t: g.x_q_t,
            x_d_st: g.x_d_st,
            x_q_st: g.x_q_st,
            t_d0_t: g.t_d0_t,
            t_q0_t: g.t_q0_t,
            t_d0_st: g.t_d0_st,
            t_q0_st: g.t_q0_st,
            s_n: g.s_n_mva,
            t_m: None,
        };
        let avr = g.avr.as_ref().map(|a| {
            let d = SexsParams::default();
            SexsParams {
                k: a.k.unwrap_or(d.k),
                t_a: a.t_a.unwrap_or(d.t_a),
                t_b: a.t_b.unwrap_or(d.t_b),
                t_e: a.t_e.unwrap_or(d.t_e),
                e_min: a.e_min.unwrap_or(d.e_min),
                e_max: a.e_max.unwrap_or(d.e_max),
                v_ref: a.v_ref,
            }
        });
        let pss = g.pss.as_ref().map(|p| {
            let d = Stab1Params::default();
            Stab1Params {
                k: p.k.unwrap_or(d.k),
                t_w: p.t_w.unwrap_or(d.t_w),
                t_1: p.t_1.unwrap_or(d.t_1),
                t_2: p.t_2.unwrap_or(d.t_2),
                t_3: p.t_3.unwrap_or(d.t_3),
                t_4: p.t_4.unwrap_or(d.t_4),
                h_lim: p.h_lim.unwrap_or(d.h_lim),
            }
        });
        generators.push(GeneratorSpec {
            name: g.name.clone(),
            bus: bus_index(&g.bus, &format!("generator {:?}: bus", g.name))?,
            params,
            v_setpoint: g.v_setpoint,
            p_setpoint_mw: g.p_setpoint_mw,
            slack: g.slack,
            avr,
            pss,
        });
    }

    let model = SystemModel {
        bus_names,
        branches,
        generators,
        f_hz: file.system.f_hz,
        s_base_mva: file.system.s_base_mva,
    };
    model
        .validate()
        .map_err(|e: SimError| invalid(path, e.to_string()))?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Experiment file
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    schema_version: u32,
    kind: String,
    /// System file path, relative to this experiment file.
    system: String,
    out_dir: Option<String>,
    seed: Option<u64>,
    noise_level: Option<f64>,
    simulation: Option<SimulationEntry>,
    #[serde(default)]
    stage: Vec<StageEntry>,
    #[serde(default)]
    event: Vec<EventEntry>,
    reference: Option<ReferenceEntry>,
    loss: Option<LossEntry>,
    optimizer: Option<OptimizerEntry>,
    #[serde(default)]
    parameter: Vec<ParameterEntry>,
    scan: Option<ScanEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulationEntry {
    dt: Option<f64>,
    t_end: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageEntry {
    t_end: f64,
    max_iterations: Option<usize>,
    epsilon: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EventEntry {
    t: f64,
    #[serde(rename = "type")]
    kind: String,
    bus: Option<String>,
    g: Option<f64>,
    b: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReferenceEntry {
    signal: Option<String>,
    file: Option<String>,
    /// Ground-truth parameter overrides used to regenerate the reference.
    truth: Option<BTreeMap<String, f64>>,
    dt: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LossEntry {
    kind: String,
    window: Option<[f64; 2]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerEntry {
    epsilon: Option<f64>,
    max_iterations: Option<usize>,
    eta_rel: Option<f64>,
    max_step_rel: Option<f64>,
    loss_threshold: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParameterEntry {
    path: String,
    initial: Option<Vec<f64>>,
    range: Option<RangeEntry>,
    bounds: Option<[f64; 2]>,
    eta: Option<f64>,
    max_step: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RangeEntry {
    lo: f64,
    hi: f64,
    lanes: usize,
    spacing: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScanEntry {
    lo: Option<f64>,
    hi: Option<f64>,
    points: Option<usize>,
    /// Parameter paths to scan; defaults to every machine parameter of
    /// every non-slack generator.
    parameters: Option<Vec<String>>,
    lanes_per_batch: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Identify,
    TunePss,
    Scan,
    Simulate,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::Identify => "identify",
            ExperimentKind::TunePss => "tune-pss",
            ExperimentKind::Scan => "scan",
            ExperimentKind::Simulate => "simulate",
        }
    }
}

#[derive(Debug, Clone)]
pub enum ReferenceSource {
    /// CSV file path, resolved relative to the experiment file.
    File(PathBuf),
    /// Simulate the system itself with these parameter overrides as truth.
    /// A `dt` finer than the experiment's integration step generates the
    /// reference at that resolution before resampling onto the fitting
    /// grid, so the fitted model sees realistic discretization mismatch.
    Generate { truth: Vec<(String, f64)>, dt: Option<f64> },
}

#[derive(Debug, Clone)]
pub struct ReferenceConfig {
    /// Trajectory signal name, e.g. `G1.delta_omega`.
    pub signal: String,
    pub source: ReferenceSource,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossConfig {
    Mse,
    MaeWindow { t_start: f64, t_end: f64 },
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Learning rate as a fraction of each parameter's scale.
    pub eta_rel: f64,
    /// Per-iteration step cap as a fraction of each parameter's scale.
    pub max_step_rel: f64,
    pub loss_threshold: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            epsilon: 1e-6,
            max_iterations: 200,
            eta_rel: 0.05,
            max_step_rel: 0.05,
            loss_threshold: None,
        }
    }
}

/// One parameter to optimize, resolved against the system model.
#[derive(Debug, Clone)]
pub struct ParameterConfig {
    pub path: String,
    /// The system model's configured value.
    pub nominal: f64,
    /// Initial guesses, one per lane.
    pub initial: Vec<f64>,
    pub bounds: Option<(f64, f64)>,
    /// Absolute learning rate; filled from `eta_rel x scale` when the file
    /// gives no explicit value.
    pub eta: f64,
    /// Absolute per-iteration step cap.
    pub max_step: f64,
}

/// One optimization stage: a fitting horizon and its own stopping limits.
/// The first stage is always the `[simulation]` horizon; `[[stage]]` tables
/// append refinement passes that start each lane from its best parameters
/// so far. A short first window keeps the loss basin wide; longer windows
/// then sharpen the fit.
#[derive(Debug, Clone)]
pub struct StageConfig {
    pub t_end: f64,
    pub max_iterations: usize,
    pub epsilon: f64,
}

#[derive(Debug, Clone)]
pub struct ScanConfig {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
    pub parameters: Vec<String>,
    /// Grid points simulated per batched run.
    pub lanes_per_batch: usize,
}

#[derive(Debug)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub system_path: PathBuf,
    pub model: SystemModel,
    pub out_dir: PathBuf,
    pub dt: f64,
    pub t_end: f64,
    pub events: EventSchedule,
    pub reference: Option<ReferenceConfig>,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub parameters: Vec<ParameterConfig>,
    pub scan: Option<ScanConfig>,
    /// Optimization stages in fitting order. The first entry covers the
    /// `[simulation]` horizon; later entries come from `[[stage]]` tables.
    /// Always non-empty for optimization experiments.
    pub stages: Vec<StageConfig>,
    pub seed: u64,
    /// Gaussian noise std as a fraction of the reference signal's RMS.
    pub noise_level: f64,
}

/// Step-size scale for a parameter: its nominal magnitude when nonzero,
/// otherwise the largest initial guess, otherwise 1.
fn param_scale(nominal: f64, initial: &[f64]) -> f64 {
    if nominal.abs() > 0.0 {
        return nominal.abs();
    }
    let max_guess = initial.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_guess > 0.0 {
        max_guess
    } else {
        1.0
    }
}

fn lane_grid(path: &Path, param: &str, range: &RangeEntry) -> Result<Vec<f64>, ConfigError> {
    let key = format!("parameter {param:?}: range");
    if range.lanes == 0 {
        return Err(invalid(path, format!("{key}.lanes must be at least 1")));
    }
    if !(range.lo.is_finite() && range.hi.is_finite() && range.lo < range.hi) {
        return Err(invalid(
            path,
            format!("{key} needs finite lo < hi, got [{}, {}]", range.lo, range.hi),
        ));
    }
    let spacing = range.spacing.as_deref().unwrap_or("linear");
    let n = range.lanes;
    let grid = match spacing {
        "linear" => (0..n)
            .map(|i| {
                if n == 1 {
                    range.lo
                } else {
                    range.lo + (range.hi - range.lo) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
        "log" => {
            if !(range.lo > 0.0) {
                return Err(invalid(
                    path,
                    format!("{key}: log spacing needs lo > 0, got {}", range.lo),
                ));
            }
            let (l0, l1) = (range.lo.ln(), range.hi.ln());
            (0..n)
                .map(|i| {
                    if n == 1 {
                        range.lo
                    } else {
                        (l0 + (l1 - l0) * i as f64 / (n - 1) as f64).exp()
                    }
                })
                .collect()
        }
        other => {
            return Err(invalid(
                path,
                format!("{key}.spacing = {other:?} (expected \"linear\" or \"log\")"),
            ))
        }
    };
    Ok(grid)
}

/// Loads an experiment file, loads the system model it names, and validates
/// every cross-reference (parameter paths, bus names, signals, windows).
pub fn load_experiment(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = read_toml_str(path)?;
    let file: ExperimentFile = toml::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    check_schema_version(path, file.schema_version)?;

    let kind = match file.kind.as_str() {
        "identify" => ExperimentKind::Identify,
        "tune-pss" => ExperimentKind::TunePss,
        "scan" => ExperimentKind::Scan,
        "simulate" => ExperimentKind::Simulate,
        other => {
            return Err(invalid(
                path,
                format!(
                    "kind = {other:?} (expected \"identify\", \"tune-pss\", \"scan\", or \"simulate\")"
                ),
            ))
        }
    };

    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
    let system_path = base_dir.join(&file.system);
    let model = load_system(&system_path)?;

    let sim = file.simulation.as_ref().ok_or_else(|| {
        invalid(path, "missing [simulation] table (needs t_end)".to_string())
    })?;
    let dt = sim.dt.unwrap_or(DEFAULT_DT);
    let t_end = sim.t_end;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid(path, format!("simulation.dt = {dt} must be positive")));
    }
    if !(t_end > dt && t_end.is_finite()) {
        return Err(invalid(
            path,
            format!("simulation.t_end = {t_end} must exceed dt = {dt}"),
        ));
    }

    let mut events = Vec::with_capacity(file.event.len());
    for (i, e) in file.event.iter().enumerate() {
        let key = format!("event[{i}]");
        let action = match e.kind.as_str() {
            "apply_fault" => {
                let bus_name = e.bus.as_ref().ok_or_else(|| {
                    invalid(path, format!("{key}: apply_fault needs a bus"))
                })?;
                let bus = model
                    .bus_names
                    .iter()
                    .position(|b| b == bus_name)
                    .ok_or_else(|| {
                        invalid(path, format!("{key}: bus = {bus_name:?} names no bus"))
                    })?;
                let g = e.g.ok_or_else(|| {
                    invalid(path, format!("{key}: apply_fault needs g (conductance, pu)"))
                })?;
                let b = e.b.ok_or_else(|| {
                    invalid(path, format!("{key}: apply_fault needs b (susceptance, pu)"))
                })?;
                EventAction::ApplyFault {
                    bus,
                    y: Complex64::new(g, b),
                }
            }
            "clear_fault" => {
                if e.bus.is_some() || e.g.is_some() || e.b.is_some() {
                    return Err(invalid(
                        path,
                        format!("{key}: clear_fault takes no bus/g/b keys"),
                    ));
                }
                EventAction::ClearFault
            }
            other => {
                return Err(invalid(
                    path,
                    format!("{key}: type = {other:?} (expected \"apply_fault\" or \"clear_fault\")"),
                ))
            }
        };
        events.push(Event { t: e.t, action });
    }
    let events = EventSchedule { events };
    events
        .validate(dt, t_end, model.n_bus())
        .map_err(|e| invalid(path, e.to_string()))?;

    let default_signal = || -> Result<String, ConfigError> {
        let gen = model
            .generators
            .iter()
            .find(|g| !g.slack)
            .or(model.generators.first())
            .ok_or_else(|| invalid(path, "system has no generators".to_string()))?;
        Ok(format!("{}.delta_omega", gen.name))
    };
    let check_signal = |signal: &str| -> Result<(), ConfigError> {
        let gen_name = signal.strip_suffix(".delta_omega").ok_or_else(|| {
            invalid(
                path,
                format!("reference.signal = {signal:?} must end in \".delta_omega\""),
            )
        })?;
        if model.generator(gen_name).is_none() {
            return Err(invalid(
                path,
                format!("reference.signal = {signal:?} names no generator"),
            ));
        }
        Ok(())
    };

    let reference = match &file.reference {
        None => None,
        Some(r) => {
            let signal = match &r.signal {
                Some(s) => {
                    check_signal(s)?;
                    s.clone()
                }
                None => default_signal()?,
            };
            if let Some(ref_dt) = r.dt {
                if !(ref_dt > 0.0 && ref_dt.is_finite()) {
                    return Err(invalid(
                        path,
                        format!("reference.dt = {ref_dt} must be a positive step"),
                    ));
                }
            }
            let source = match (&r.file, &r.truth) {
                (Some(_), Some(_)) => {
                    return Err(invalid(
                        path,
                        "reference: give either file or truth, not both".to_string(),
                    ))
                }
                (Some(f), None) => {
                    if r.dt.is_some() {
                        return Err(invalid(
                            path,
                            "reference.dt applies only to generated references".to_string(),
                        ));
                    }
                    ReferenceSource::File(base_dir.join(f))
                }
                (None, truth) => {
                    let mut pairs = Vec::new();
                    if let Some(map) = truth {
                        for (p, v) in map {
                            model
                                .resolve_param(p)
                                .map_err(|e| invalid(path, format!("reference.truth: {e}")))?;
                            if !v.is_finite() {
                                return Err(invalid(
                                    path,
                                    format!("reference.truth.{p:?} = {v} is not finite"),
                                ));
                            }
                            pairs.push((p.clone(), *v));
                        }
                    }
                    ReferenceSource::Generate {
                        truth: pairs,
                        dt: r.dt,
                    }
                }
            };
            Some(ReferenceConfig { signal, source })
        }
    };

    let loss = match &file.loss {
        None => match kind {
            ExperimentKind::TunePss => LossConfig::MaeWindow {
                t_start: 1.0,
                t_end: 10.0,
            },
            _ => LossConfig::Mse,
        },
        Some(l) => match l.kind.as_str() {
            "mse" => {
                if l.window.is_some() {
                    return Err(invalid(path, "loss: mse takes no window".to_string()));
                }
                LossConfig::Mse
            }
            "mae_window" => {
                let w = l.window.ok_or_else(|| {
                    invalid(path, "loss: mae_window needs window = [start, end]".to_string())
                })?;
                LossConfig::MaeWindow {
                    t_start: w[0],
                    t_end: w[1],
                }
            }
            other => {
                return Err(invalid(
                    path,
                    format!("loss.kind = {other:?} (expected \"mse\" or \"mae_window\")"),
                ))
            }
        },
    };
    if let LossConfig::MaeWindow { t_start, t_end: w_end } = loss {
        if !(0.0 <= t_start && t_start < w_end && w_end <= t_end) {
            return Err(invalid(
                path,
                format!("loss.window = [{t_start}, {w_end}] must lie inside [0, {t_end}]"),
            ));
        }
    }

    let defaults = OptimizerConfig::default();
    let optimizer = match &file.optimizer {
        None => defaults,
        Some(o) => {
            let cfg = OptimizerConfig {
                epsilon: o.epsilon.unwrap_or(defaults.epsilon),
                max_iterations: o.max_iterations.unwrap_or(defaults.max_iterations),
                eta_rel: o.eta_rel.unwrap_or(defaults.eta_rel),
                max_step_rel: o.max_step_rel.unwrap_or(defaults.max_step_rel),
                loss_threshold: o.loss_threshold,
            };
            if !(cfg.epsilon > 0.0) {
                return Err(invalid(path, "optimizer.epsilon must be positive".to_string()));
            }
            if cfg.max_iterations == 0 {
                return Err(invalid(
                    path,
                    "optimizer.max_iterations must be at least 1".to_string(),
                ));
            }
            if !(cfg.eta_rel > 0.0) || !(cfg.max_step_rel > 0.0) {
                return Err(invalid(
                    path,
                    "optimizer.eta_rel and max_step_rel must be positive".to_string(),
                ));
            }
            cfg
        }
    };

    let mut parameters = Vec::with_capacity(file.parameter.len());
    let mut lanes_seen: Option<usize> = None;
    for p in &file.parameter {
        let key = format!("parameter {:?}", p.path);
        let param_ref = model
            .resolve_param(&p.path)
            .map_err(|e| invalid(path, format!("{key}: {e}")))?;
        let initial = match (&p.initial, &p.range) {
            (Some(_), Some(_)) => {
                return Err(invalid(
                    path,
                    format!("{key}: give either initial or range, not both"),
                ))
            }
            (Some(values), None) => {
                if values.is_empty() {
                    return Err(invalid(path, format!("{key}: initial is empty")));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(invalid(path, format!("{key}: initial has a non-finite value")));
                }
                values.clone()
            }
            (None, Some(range)) => lane_grid(path, &p.path, range)?,
            (None, None) => vec![param_ref.nominal],
        };
        match lanes_seen {
            None => lanes_seen = Some(initial.len()),
            Some(n) if n != initial.len() => {
                return Err(invalid(
                    path,
                    format!(
                        "{key}: {} lanes, but an earlier parameter has {n} (all must match)",
                        initial.len()
                    ),
                ))
            }
            _ => {}
        }
        let bounds = match p.bounds {
            None => None,
            Some([lo, hi]) => {
                if !(lo < hi) {
                    return Err(invalid(
                        path,
                        format!("{key}: bounds = [{lo}, {hi}] are out of order"),
                    ));
                }
                if initial.iter().any(|v| *v < lo || *v > hi) {
                    return Err(invalid(
                        path,
                        format!("{key}: an initial guess lies outside bounds [{lo}, {hi}]"),
                    ));
                }
                Some((lo, hi))
            }
        };
        let scale = param_scale(param_ref.nominal, &initial);
        let eta = p.eta.unwrap_or(optimizer.eta_rel * scale);
        let max_step = p.max_step.unwrap_or(optimizer.max_step_rel * scale);
        if !(eta > 0.0) || !(max_step > 0.0) {
            return Err(invalid(
                path,
                format!("{key}: eta and max_step must be positive"),
            ));
        }
        parameters.push(ParameterConfig {
            path: p.path.clone(),
            nominal: param_ref.nominal,
            initial,
            bounds,
            eta,
            max_step,
        });
    }

    let scan = match &file.scan {
        None => None,
        Some(s) => {
            let lo = s.lo.unwrap_or(0.5);
            let hi = s.hi.unwrap_or(2.0);
            let points = s.points.unwrap_or(31);
            if !(lo > 0.0 && lo < hi) {
                return Err(invalid(
                    path,
                    format!("scan: needs 0 < lo < hi, got [{lo}, {hi}]"),
                ));
            }
            if points < 3 {
                return Err(invalid(path, format!("scan.points = {points} must be >= 3")));
            }
            let parameters = match &s.parameters {
                Some(list) => {
                    for p in list {
                        model
                            .resolve_param(p)
                            .map_err(|e| invalid(path, format!("scan.parameters: {e}")))?;
                    }
                    list.clone()
                }
                None => {
                    let mut all = Vec::new();
                    for g in model.generators.iter().filter(|g| !g.slack) {
                        for field in GenParams::PARAM_NAMES {
                            all.push(format!("{}.{}", g.name, field));
                        }
                    }
                    all
                }
            };
            let lanes_per_batch = s.lanes_per_batch.unwrap_or(8).max(1);
            Some(ScanConfig {
                lo,
                hi,
                points,
                parameters,
                lanes_per_batch,
            })
        }
    };

    // Kind-specific completeness checks, so misassembled files fail at load
    // time rather than mid-run.
    match kind {
        ExperimentKind::Identify | ExperimentKind::TunePss => {
            if parameters.is_empty() {
                return Err(invalid(
                    path,
                    format!("kind = {:?} needs at least one [[parameter]]", kind.as_str()),
                ));
            }
        }
        ExperimentKind::Scan => {
            if scan.is_none() {
                return Err(invalid(path, "kind = \"scan\" needs a [scan] table".to_string()));
            }
        }
        ExperimentKind::Simulate => {}
    }
    if matches!(kind, ExperimentKind::Identify | ExperimentKind::Scan)
        && matches!(loss, LossConfig::Mse)
        && reference.is_none()
    {
        return Err(invalid(
            path,
            format!(
                "kind = {:?} with an mse loss needs a [reference] table",
                kind.as_str()
            ),
        ));
    }

    let noise_level = file.noise_level.unwrap_or(0.0);
    if !(noise_level >= 0.0 && noise_level.is_finite()) {
        return Err(invalid(
            path,
            format!("noise_level = {noise_level} must be a finite fraction >= 0"),
        ));
    }

    if !file.stage.is_empty()
        && !matches!(kind, ExperimentKind::Identify | ExperimentKind::TunePss)
    {
        return Err(invalid(
            path,
            format!("kind = {:?} takes no [[stage]] tables", kind.as_str()),
        ));
    }
    let mut stages = vec![StageConfig {
        t_end,
        max_iterations: optimizer.max_iterations,
        epsilon: optimizer.epsilon,
    }];
    for (i, s) in file.stage.iter().enumerate() {
        let key = format!("stage[{i}]");
        let prev = stages.last().unwrap().t_end;
        if !(s.t_end > prev && s.t_end.is_finite()) {
            return Err(invalid(
                path,
                format!(
                    "{key}: t_end = {} must exceed the previous stage's horizon {prev}",
                    s.t_end
                ),
            ));
        }
        let max_iterations = s.max_iterations.unwrap_or(optimizer.max_iterations);
        if max_iterations == 0 {
            return Err(invalid(path, format!("{key}: max_iterations must be >= 1")));
        }
        let epsilon = s.epsilon.unwrap_or(optimizer.epsilon);
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(invalid(
                path,
                format!("{key}: epsilon = {epsilon} must be a positive number"),
            ));
        }
        stages.push(StageConfig {
            t_end: s.t_end,
            max_iterations,
            epsilon,
        });
    }

    Ok(ExperimentConfig {
        kind,
        system_path,
        model,
        out_dir: base_dir.join(file.out_dir.as_deref().unwrap_or("out")),
        dt,
        t_end,
        events,
        reference,
        loss,
        optimizer,
        parameters,
        scan,
        stages,
        seed: file.seed.unwrap_or(0),
        noise_level,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_file(dir: &Path, name: &str, content: &str) -> PathBuf {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    const SYSTEM_TOML: &str = r#"
schema_version = 1

[system]
f_hz = 50.0
s_base_mva = 2200.0

[[bus]]
name = "HV1"

[[bus]]
name = "HV2"

[[branch]]
from = "HV1"
to = "HV2"
x = 0.65

[[generator]]
name = "G1"
bus = "HV1"
s_n_mva = 2200.0
v_setpoint = 1.0
p_setpoint_mw = 1998.0
H = 3.5
X_d = 1.81
X_q = 1.76
X_d_t = 0.3
X_q_t = 0.65
X_d_st = 0.23
X_q_st = 0.23
T_d0_t = 8.0
T_q0_t = 1.0
T_d0_st = 0.03
T_q0_st = 0.07

[generator.avr]
K = 100.0

[generator.pss]
K = 40.0

[[generator]]
name = "IB"
bus = "HV2"
s_n_mva = 1.0e6
v_setpoint = 0.90081
slack = true
H = 1.0e5
X_d = 1.81
X_q = 1.76
X_d_t = 0.3
X_q_t = 0.65
X_d_st = 0.23
X_q_st = 0.23
T_d0_t = 8.0
T_q0_t = 1.0
T_d0_st = 0.03
T_q0_st = 0.07
"#;

    const EXPERIMENT_TOML: &str = r#"
schema_version = 1
kind = "identify"
system = "sys.toml"
seed = 42

[simulation]
dt = 0.005
t_end = 10.0

[[event]]
t = 1.0
type = "apply_fault"
bus = "HV1"
g = 1.0e5
b = -1.0e5

[[event]]
t = 1.05
type = "clear_fault"

[reference]
[reference.truth]
"G1.H" = 3.5

[[parameter]]
path = "G1.H"
initial = [8.0]
bounds = [0.5, 20.0]
"#;

    #[test]
    fn test_system_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(dir.path(), "sys.toml", SYSTEM_TOML);
        let model = load_system(&path).unwrap();
        assert_eq!(model.bus_names, vec!["HV1", "HV2"]);
        assert_eq!(model.generators.len(), 2);
        let g1 = &model.generators[0];
        assert_eq!(g1.params.h, 3.5);
        assert_eq!(g1.params.d, 0.0);
        let avr = g1.avr.as_ref().unwrap();
        assert_eq!(avr.k, 100.0);
        assert_eq!(avr.t_b, 10.0);
        let pss = g1.pss.as_ref().unwrap();
        assert_eq!(pss.t_w, 11.0);
        assert!(model.generators[1].slack);
    }

    #[test]
    fn test_experiment_loads_with_defaults_filled() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "sys.toml", SYSTEM_TOML);
        let path = write_file(dir.path(), "exp.toml", EXPERIMENT_TOML);
        let cfg = load_experiment(&path).unwrap();
        assert_eq!(cfg.kind, ExperimentKind::Identify);
        assert_eq!(cfg.dt, 0.005);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.noise_level, 0.0);
        assert_eq!(cfg.loss, LossConfig::Mse);
        assert_eq!(cfg.optimizer.max_iterations, 200);
        let p = &cfg.parameters[0];
        assert_eq!(p.nominal, 3.5);
        assert!((p.eta - 0.05 * 3.5).abs() < 1e-12);
        assert!((p.max_step - 0.05 * 3.5).abs() < 1e-12);
        assert_eq!(p.bounds, Some((0.5, 20.0)));
        let r = cfg.reference.unwrap();
        assert_eq!(r.signal, "G1.delta_omega");
        match r.source {
            ReferenceSource::Generate { truth, dt } => {
                assert_eq!(truth, vec![("G1.H".to_string(), 3.5)]);
                assert_eq!(dt, None);
            }
            other => panic!("expected generated reference, got {other:?}"),
        }
        assert_eq!(cfg.events.events.len(), 2);
    }

    #[test]
    fn test_unknown_key_is_named_in_error() {
        let dir = tempfile::tempdir().unwrap();
        let bad = SYSTEM_TOML.replace("f_hz = 50.0", "f_hz = 50.0\nfrequenzy = 60.0");
        let path = write_file(dir.path(), "sys.toml", &bad);
        match load_system(&path) {
            Err(ConfigError::Parse { message, .. }) => {
                assert!(message.contains("frequenzy"), "message: {message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn test_unknown_parameter_path_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "sys.toml", SYSTEM_TOML);
        let bad = EXPERIMENT_TOML.replace("path = \"G1.H\"", "path = \"G1.H_gen\"");
        let path = write_file(dir.path(), "exp.toml", &bad);
        match load_experiment(&path) {
            Err(ConfigError::Invalid { message, .. }) => {
                assert!(message.contains("G1.H_gen"), "message: {message}");
            }
            other => panic!("expected invalid-config error, got {other:?}"),
        }
    }

    #[test]
    fn test_wrong_schema_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bad = SYSTEM_TOML.replace("schema_version = 1", "schema_version = 2");
        let path = write_file(dir.path(), "sys.toml", &bad);
        assert!(matches!(
            load_system(&path),
            Err(ConfigError::Invalid { .. })
        ));
    }

    #[test]
    fn test_range_lanes_log_spacing() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "sys.toml", SYSTEM_TOML);
        let ranged = EXPERIMENT_TOML.replace(
            "initial = [8.0]",
            "range = { lo = 1.75, hi = 7.0, lanes = 8, spacing = \"log\" }",
        );
        let path = write_file(dir.path(), "exp.toml", &ranged);
        let cfg = load_experiment(&path).unwrap();
        let lanes = &cfg.parameters[0].initial;
        assert_eq!(lanes.len(), 8);
        assert!((lanes[0] - 1.75).abs() < 1e-12);
        assert!((lanes[7] - 7.0).abs() < 1e-12);
        let ratio = lanes[1] / lanes[0];
        for w in lanes.windows(2) {
            assert!((w[1] / w[0] - ratio).abs() < 1e-9, "not log-spaced: {lanes:?}");
        }
    }

    #[test]
    fn test_event_validation_catches_off_grid_and_bad_bus() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "sys.toml", SYSTEM_TOML);
        let off_grid = EXPERIMENT_TOML.replace("t = 1.05", "t = 1.0512");
        let path = write_file(dir.path(), "exp.toml", &off_grid);
        assert!(matches!(
            load_experiment(&path),
            Err(ConfigError::Invalid { .. })
        ));
        let bad_bus = EXPERIMENT_TOML.replace("bus = \"HV1\"", "bus = \"HV9\"");
        let path = write_file(dir.path(), "exp2.toml", &bad_bus);
        match load_experiment(&path) {
            Err(ConfigError::Invalid { message, .. }) => {
                assert!(message.contains("HV9"), "message: {message}");
            }
            other => panic!("expected invalid-config error, got {other:?}"),
        }
    }

    #[test]
    fn test_scan_defaults_cover_all_machine_parameters() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "sys.toml", SYSTEM_TOML);
        let scan_toml = r#"
schema_version = 1
kind = "scan"
system = "sys.toml"

[simulation]
t_end = 10.0

[reference]
[reference.truth]

[scan]
points = 16
"#;
        let path = write_file(dir.path(), "scan.toml", scan_toml);
        let cfg = load_experiment(&path).unwrap();
        let scan = cfg.scan.unwrap();
        assert_eq!(scan.parameters.len(), GenParams::PARAM_NAMES.len());
        assert!(scan.parameters.contains(&"G1.H".to_string()));
        assert!(scan.parameters.contains(&"G1.X_d_st".to_string()));
        assert!(!scan.parameters.iter().any(|p| p.starts_with("IB.")));
        assert_eq!(scan.lo, 0.5);
        assert_eq!(scan.hi, 2.0);
    }

    #[test]
    fn test_missing_reference_for_identify_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "sys.toml", SYSTEM_TOML);
        let no_ref = EXPERIMENT_TOML
            .replace("[reference]\n[reference.truth]\n\"G1.H\" = 3.5\n", "");
        let path = write_file(dir.path(), "exp.toml", &no_ref);
        match load_experiment(&path) {
            Err(ConfigError::Invalid { message, .. }) => {
                assert!(message.contains("reference"), "message: {message}");
            }
            other => panic!("expected invalid-config error, got {other:?}"),
        }
    }

    #[test]
    fn test_stage_tables_extend_fitting_schedule() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "sys.toml", SYSTEM_TOML);
        let staged = format!(
            "{EXPERIMENT_TOML}\n[[stage]]\nt_end = 15.0\nmax_iterations = 7\n\n\
             [[stage]]\nt_end = 20.0\nepsilon = 1e-9\n"
        );
        let path = write_file(dir.path(), "exp.toml", &staged);
        let cfg = load_experiment(&path).unwrap();
        assert_eq!(cfg.stages.len(), 3);
        assert_eq!(cfg.stages[0].t_end, cfg.t_end);
        assert_eq!(cfg.stages[0].max_iterations, cfg.optimizer.max_iterations);
        assert_eq!(cfg.stages[0].epsilon, cfg.optimizer.epsilon);
        assert_eq!(cfg.stages[1].t_end, 15.0);
        assert_eq!(cfg.stages[1].max_iterations, 7);
        assert_eq!(cfg.stages[1].epsilon, cfg.optimizer.epsilon);
        assert_eq!(cfg.stages[2].t_end, 20.0);
        assert_eq!(cfg.stages[2].max_iterations, cfg.optimizer.max_iterations);
        assert_eq!(cfg.stages[2].epsilon, 1e-9);
    }

    #[test]
    fn test_stage_horizons_must_increase() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "sys.toml", SYSTEM_TOML);
        let staged = format!("{EXPERIMENT_TOML}\n[[stage]]\nt_end = 10.0\n");
        let path = write_file(dir.path(), "exp.toml", &staged);
        match load_experiment(&path) {
            Err(ConfigError::Invalid { message, .. }) => {
                assert!(message.contains("stage[0]"), "message: {message}");
                assert!(message.contains("exceed"), "message: {message}");
            }
            other => panic!("expected invalid-config error, got {other:?}"),
        }
    }

    #[test]
    fn test_stage_tables_rejected_outside_optimization() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "sys.toml", SYSTEM_TOML);
        let staged = format!(
            "{}\n[[stage]]\nt_end = 15.0\n",
            EXPERIMENT_TOML.replace("kind = \"identify\"", "kind = \"simulate\"")
        );
        let path = write_file(dir.path(), "exp.toml", &staged);
        match load_experiment(&path) {
            Err(ConfigError::Invalid { message, .. }) => {
                assert!(message.contains("[[stage]]"), "message: {message}");
            }
            other => panic!("expected invalid-config error, got {other:?}"),
        }
    }

    #[test]
    fn test_reference_dt_parses_and_is_validated() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "sys.toml", SYSTEM_TOML);
        let with_dt = EXPERIMENT_TOML.replace("[reference]", "[reference]\ndt = 0.001");
        let path = write_file(dir.path(), "exp.toml", &with_dt);
        let cfg = load_experiment(&path).unwrap();
        match cfg.reference.unwrap().source {
            ReferenceSource::Generate { dt, .. } => assert_eq!(dt, Some(0.001)),
            other => panic!("expected generated reference, got {other:?}"),
        }

        let bad = EXPERIMENT_TOML.replace("[reference]", "[reference]\ndt = -0.001");
        let path = write_file(dir.path(), "exp2.toml", &bad);
        match load_experiment(&path) {
            Err(ConfigError::Invalid { message, .. }) => {
                assert!(message.contains("reference.dt"), "message: {message}");
            }
            other => panic!("expected invalid-config error, got {other:?}"),
        }
    }

    #[test]
    fn test_reference_dt_rejected_for_file_references() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "sys.toml", SYSTEM_TOML);
        write_file(dir.path(), "ref.csv", "time,value\n0.0,0.0\n10.0,0.0\n");
        let from_file = EXPERIMENT_TOML.replace(
            "[reference]\n[reference.truth]\n\"G1.H\" = 3.5\n",
            "[reference]\nfile = \"ref.csv\"\ndt = 0.001\n",
        );
        let path = write_file(dir.path(), "exp.toml", &from_file);
        match load_experiment(&path) {
            Err(ConfigError::Invalid { message, .. }) => {
                assert!(
                    message.contains("generated references"),
                    "message: {message}"
                );
            }
            other => panic!("expected invalid-config error, got {other:?}"),
        }
    }
}
