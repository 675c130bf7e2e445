//! Experiment runners: wire a loaded configuration to the simulator and
//! optimizer, and write result artifacts (trajectory CSVs, the optimization
//! trace, the scan grid, and a run summary).
//!
//! Artifact layout inside the output directory:
//!
//! * `summary.toml` - stable-keyed results for every experiment kind
//! * `reference.csv` - the reference series actually fitted (resampled,
//!   noise included), so a run can be reproduced from its own artifacts
//! * `trace.csv` - one row per (iteration, lane): loss, acceptance,
//!   parameter values, gradients
//! * `trajectory_initial.csv` / `trajectory_final.csv` - the fitted signal
//!   at the first evaluation and at the best parameters
//! * `trajectory_<gen>.csv` - forward-simulation export per generator
//! * `scan.csv` - one row per (parameter, grid point)
//!
//! Partial progress is preserved: an optimizer abort or an unstable forward
//! run still writes the trace/trajectory rows gathered so far plus a summary
//! naming the failure before the error propagates.

use crate::config::{
    ConfigError, ExperimentConfig, ExperimentKind, LossConfig, ReferenceConfig, ReferenceSource,
};
use crate::io::{self, IoError, SummaryValue};
use crate::optimizer::{
    self, Evaluation, OptError, OptProblem, OptTrace, ParamSpec, ScanRow, Termination,
};
use crate::simulator::{
    bind_system, grid_index, init_steady_state, run, EventSchedule, SimError, SystemModel,
};
use crate::tape::{backward, Tape};
use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug)]
pub enum ExperimentError {
    Config(ConfigError),
    Io(IoError),
    Sim(SimError),
    Opt(OptError),
}

impl fmt::Display for ExperimentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExperimentError::Config(e) => write!(f, "{e}"),
            ExperimentError::Io(e) => write!(f, "{e}"),
            ExperimentError::Sim(e) => write!(f, "{e}"),
            ExperimentError::Opt(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ExperimentError {}

impl From<ConfigError> for ExperimentError {
    fn from(e: ConfigError) -> Self {
        ExperimentError::Config(e)
    }
}
impl From<IoError> for ExperimentError {
    fn from(e: IoError) -> Self {
        ExperimentError::Io(e)
    }
}
impl From<SimError> for ExperimentError {
    fn from(e: SimError) -> Self {
        ExperimentError::Sim(e)
    }
}
impl From<OptError> for ExperimentError {
    fn from(e: OptError) -> Self {
        ExperimentError::Opt(e)
    }
}
impl From<crate::tape::AdError> for ExperimentError {
    fn from(e: crate::tape::AdError) -> Self {
        ExperimentError::Sim(SimError::from(e))
    }
}

impl ExperimentError {
    /// Process exit code: 1 configuration, 2 optimizer abort, 3 instability.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::Io(_) => 1,
            ExperimentError::Opt(OptError::AllLanesFrozen { .. }) => 2,
            ExperimentError::Opt(OptError::Validation(_)) => 1,
            ExperimentError::Opt(OptError::Sim(e)) => sim_exit_code(e),
            ExperimentError::Sim(e) => sim_exit_code(e),
        }
    }
}

fn sim_exit_code(e: &SimError) -> i32 {
    match e {
        SimError::Validation(_) => 1,
        _ => 3,
    }
}

/// Where a finished run put its results.
#[derive(Debug)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub summary: Vec<(String, SummaryValue)>,
    pub files: Vec<PathBuf>,
}

impl RunReport {
    pub fn summary_value(&self, key: &str) -> Option<&SummaryValue> {
        self.summary.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn summary_float(&self, key: &str) -> Option<f64> {
        match self.summary_value(key)? {
            SummaryValue::Float(v) => Some(*v),
            SummaryValue::Int(v) => Some(*v as f64),
            SummaryValue::Text(_) => None,
        }
    }
}

/// TOML-safe summary key fragment: dots and other separators become `_`.
fn key_of(path: &str) -> String {
    path.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
        .collect()
}

fn float_list(values: impl IntoIterator<Item = f64>) -> SummaryValue {
    SummaryValue::Text(
        values
            .into_iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(", "),
    )
}

/// The sample times `run` produces for this grid.
fn grid_times(dt: f64, t_end: f64) -> Result<Vec<f64>, SimError> {
    let steps = grid_index(t_end, dt).filter(|&k| k > 0).ok_or_else(|| {
        SimError::Validation(format!(
            "t_end = {t_end} must be a positive integer multiple of dt = {dt}"
        ))
    })?;
    Ok((0..=steps).map(|k| k as f64 * dt).collect())
}

/// One batched differentiable evaluation: simulate, apply the loss, sweep
/// gradients back to the named parameters.
struct BatchEval {
    loss: Vec<f64>,
    /// `[param][lane]` loss gradients.
    grads: Vec<Vec<f64>>,
    times: Vec<f64>,
    /// Loss-signal values `[sample][lane]`.
    signal_values: Vec<Vec<f64>>,
}

fn evaluate_batch(
    model: &SystemModel,
    events: &EventSchedule,
    dt: f64,
    t_end: f64,
    loss_cfg: &LossConfig,
    signal: &str,
    reference: Option<&[f64]>,
    param_paths: &[&str],
    values: &[Vec<f64>],
) -> Result<BatchEval, OptError> {
    let lanes = values[0].len();
    let tape = Tape::new(lanes).map_err(SimError::from)?;
    let mut overrides = HashMap::new();
    let mut vars = Vec::with_capacity(param_paths.len());
    for (path, vals) in param_paths.iter().zip(values) {
        let var = tape.var(vals).map_err(SimError::from)?;
        overrides.insert(path.to_string(), var.clone());
        vars.push(var);
    }
    let mut bound = bind_system(&tape, model, &overrides).map_err(OptError::from)?;
    let init = init_steady_state(&mut bound).map_err(OptError::from)?;
    let traj = run(&mut bound, &init, events, dt, t_end).map_err(OptError::from)?;
    let loss = match loss_cfg {
        LossConfig::Mse => {
            let reference = reference.ok_or_else(|| {
                OptError::Validation("mse loss needs a reference series".into())
            })?;
            let nodes = traj.signal(signal).ok_or_else(|| {
                OptError::Validation(format!("trajectory has no signal named {signal:?}"))
            })?;
            optimizer::loss_mse(nodes, reference, &tape)?
        }
        LossConfig::MaeWindow { t_start, t_end: w_end } => {
            optimizer::loss_mae_window(&traj, signal, *t_start, *w_end, &tape)?
        }
    };
    let g = backward(&loss);
    let grads: Vec<Vec<f64>> = vars.iter().map(|v| g.grad(v).to_vec()).collect();
    let signal_values: Vec<Vec<f64>> = traj
        .signal(signal)
        .expect("signal presence checked above")
        .iter()
        .map(|n| n.values())
        .collect();
    Ok(BatchEval {
        loss: loss.values(),
        grads,
        times: traj.times,
        signal_values,
    })
}

/// Instability and a failed steady-state self-check are recoverable inside
/// an optimization or scan: the affected evaluations become non-finite and
/// lanes revert or cells stay empty. Anything else is a hard error.
fn is_recoverable(e: &OptError) -> bool {
    matches!(
        e,
        OptError::Sim(SimError::Unstable { .. }) | OptError::Sim(SimError::InitResidual { .. })
    )
}

/// Single-lane forward simulation with fixed parameter overrides; returns
/// (times, signal values).
fn simulate_signal(
    model: &SystemModel,
    events: &EventSchedule,
    dt: f64,
    t_end: f64,
    overrides_f64: &[(String, f64)],
    signal: &str,
) -> Result<(Vec<f64>, Vec<f64>), SimError> {
    let tape = Tape::new(1)?;
    let mut overrides = HashMap::new();
    for (path, v) in overrides_f64 {
        overrides.insert(path.clone(), tape.constant(*v));
    }
    let mut bound = bind_system(&tape, model, &overrides)?;
    let init = init_steady_state(&mut bound)?;
    let traj = run(&mut bound, &init, events, dt, t_end)?;
    let values = traj
        .lane_series(signal, 0)
        .ok_or_else(|| SimError::Validation(format!("no signal named {signal:?}")))?;
    Ok((traj.times, values))
}

/// Builds the reference series on the simulation grid out to `t_end`, plus
/// summary entries recording where it came from. Staged fits pass the
/// longest stage horizon so one measured series serves every stage prefix.
fn prepare_reference(
    cfg: &ExperimentConfig,
    rc: &ReferenceConfig,
    t_end: f64,
) -> Result<(Vec<f64>, Vec<(String, SummaryValue)>), ExperimentError> {
    let times = grid_times(cfg.dt, t_end)?;
    match &rc.source {
        ReferenceSource::File(path) => {
            let series = io::read_series_csv(path)?;
            let values = io::resample(&series, &times)?;
            Ok((
                values,
                vec![(
                    "reference_source".into(),
                    SummaryValue::Text(path.display().to_string()),
                )],
            ))
        }
        ReferenceSource::Generate { truth, dt } => {
            let gen_dt = dt.unwrap_or(cfg.dt);
            let (gen_times, clean) = simulate_signal(
                &cfg.model,
                &cfg.events,
                gen_dt,
                t_end,
                truth,
                &rc.signal,
            )?;
            // Resample onto the fitting grid (identity when the steps match),
            // then add measurement noise on that grid.
            let clean = io::resample(
                &io::ReferenceSeries {
                    times: gen_times,
                    values: clean,
                },
                &times,
            )?;
            let values = io::add_noise(&clean, cfg.noise_level, cfg.seed);
            let mut entries = vec![
                ("reference_source".into(), SummaryValue::Text("generated".into())),
                ("reference_dt".into(), SummaryValue::Float(gen_dt)),
                ("noise_level".into(), SummaryValue::Float(cfg.noise_level)),
                ("seed".into(), SummaryValue::Int(cfg.seed as i64)),
            ];
            for (path, v) in truth {
                entries.push((format!("truth_{}", key_of(path)), SummaryValue::Float(*v)));
            }
            Ok((values, entries))
        }
    }
}

fn write_trace_csv(
    path: &Path,
    param_paths: &[&str],
    stage_traces: &[OptTrace],
) -> Result<(), IoError> {
    let mut header = String::from("stage,iteration,lane,loss,accepted,eta_scale");
    for p in param_paths {
        header.push(',');
        header.push_str(p);
    }
    for p in param_paths {
        header.push_str(",grad_");
        header.push_str(p);
    }
    let mut rows = Vec::new();
    for (s, trace) in stage_traces.iter().enumerate() {
        for (i, it) in trace.iterations.iter().enumerate() {
            for lane in 0..it.loss.len() {
                let mut row = format!(
                    "{s},{i},{lane},{},{},{}",
                    it.loss[lane], it.accepted[lane] as u8, it.eta_scale[lane]
                );
                for p in 0..param_paths.len() {
                    row.push_str(&format!(",{}", it.params[p][lane]));
                }
                for p in 0..param_paths.len() {
                    row.push_str(&format!(",{}", it.grads[p][lane]));
                }
                rows.push(row);
            }
        }
    }
    io::write_csv(path, &header, rows)
}

fn termination_name(t: Termination) -> &'static str {
    match t {
        Termination::ParamTolerance => "param_tolerance",
        Termination::LossThreshold => "loss_threshold",
        Termination::MaxIterations => "max_iterations",
    }
}

/// Entry point: dispatches on the experiment kind, creates the output
/// directory, and returns what was written.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport, ExperimentError> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|source| {
        ExperimentError::Io(IoError::Io {
            path: cfg.out_dir.clone(),
            source,
        })
    })?;
    match cfg.kind {
        ExperimentKind::Simulate => run_simulate(cfg),
        ExperimentKind::Identify | ExperimentKind::TunePss => run_optimization(cfg),
        ExperimentKind::Scan => run_scan(cfg),
    }
}

fn base_summary(cfg: &ExperimentConfig) -> Vec<(String, SummaryValue)> {
    vec![
        ("experiment".into(), SummaryValue::Text(cfg.kind.as_str().into())),
        (
            "system".into(),
            SummaryValue::Text(cfg.system_path.display().to_string()),
        ),
        ("dt".into(), SummaryValue::Float(cfg.dt)),
        ("t_end".into(), SummaryValue::Float(cfg.t_end)),
    ]
}

fn run_simulate(cfg: &ExperimentConfig) -> Result<RunReport, ExperimentError> {
    let started = Instant::now();
    let mut summary = base_summary(cfg);
    let mut files = Vec::new();

    let tape = Tape::new(1)?;
    let mut bound = bind_system(&tape, &cfg.model, &HashMap::new())?;
    let init = init_steady_state(&mut bound)?;
    let outcome = run(&mut bound, &init, &cfg.events, cfg.dt, cfg.t_end);

    // An unstable run still exports whatever was integrated.
    let (traj, failure) = match outcome {
        Ok(t) => (t, None),
        Err(SimError::Unstable {
            first_failures,
            trajectory,
        }) => (trajectory, Some(first_failures)),
        Err(e) => return Err(e.into()),
    };
    let detached = traj.detach();

    for (i, gen) in cfg.model.generators.iter().enumerate() {
        let name = format!("{}.delta_omega", gen.name);
        let values = detached
            .lane_series(&name, 0)
            .expect("every generator records a speed signal");
        let values = if cfg.noise_level > 0.0 {
            io::add_noise(&values, cfg.noise_level, cfg.seed.wrapping_add(i as u64))
        } else {
            values
        };
        let path = cfg.out_dir.join(format!("trajectory_{}.csv", gen.name));
        io::write_series_csv(&path, &detached.times, &values)?;
        let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        summary.push((
            format!("peak_abs_delta_omega_{}", key_of(&gen.name)),
            SummaryValue::Float(peak),
        ));
        files.push(path);
    }
    summary.push(("noise_level".into(), SummaryValue::Float(cfg.noise_level)));
    summary.push(("seed".into(), SummaryValue::Int(cfg.seed as i64)));
    summary.push((
        "samples".into(),
        SummaryValue::Int(detached.times.len() as i64),
    ));
    if let Some(failures) = &failure {
        summary.push(("status".into(), SummaryValue::Text("unstable".into())));
        summary.push((
            "first_failure_t".into(),
            SummaryValue::Float(failures.iter().map(|(_, t)| *t).fold(f64::INFINITY, f64::min)),
        ));
    } else {
        summary.push(("status".into(), SummaryValue::Text("ok".into())));
    }
    summary.push((
        "wall_time_s".into(),
        SummaryValue::Float(started.elapsed().as_secs_f64()),
    ));

    let summary_path = cfg.out_dir.join("summary.toml");
    io::write_summary(&summary_path, &summary)?;
    files.push(summary_path);

    match failure {
        None => Ok(RunReport {
            out_dir: cfg.out_dir.clone(),
            summary,
            files,
        }),
        Some(first_failures) => Err(SimError::Unstable {
            first_failures,
            trajectory: traj,
        }
        .into()),
    }
}

fn run_optimization(cfg: &ExperimentConfig) -> Result<RunReport, ExperimentError> {
    let started = Instant::now();
    let mut summary = base_summary(cfg);
    let mut files = Vec::new();

    let signal = match &cfg.reference {
        Some(rc) => rc.signal.clone(),
        None => {
            let gen = cfg
                .model
                .generators
                .iter()
                .find(|g| !g.slack)
                .or(cfg.model.generators.first())
                .ok_or_else(|| SimError::Validation("system has no generators".into()))?;
            format!("{}.delta_omega", gen.name)
        }
    };
    summary.push(("signal".into(), SummaryValue::Text(signal.clone())));

    // The longest stage horizon; the reference covers it once and earlier
    // stages fit prefixes, so every stage sees the same measured series.
    let full_t_end = cfg.stages.last().map(|s| s.t_end).unwrap_or(cfg.t_end);

    // Reference series (MSE losses fit it; the MAE window needs none).
    let mut truth_pairs: Vec<(String, f64)> = Vec::new();
    if let Some(ReferenceConfig {
        source: ReferenceSource::Generate { truth, .. },
        ..
    }) = &cfg.reference
    {
        truth_pairs = truth.clone();
    }
    let reference = match &cfg.loss {
        LossConfig::Mse => {
            let rc = cfg.reference.as_ref().ok_or_else(|| {
                ExperimentError::Opt(OptError::Validation(
                    "mse loss needs a [reference] table".into(),
                ))
            })?;
            let (values, entries) = prepare_reference(cfg, rc, full_t_end)?;
            summary.extend(entries);
            let ref_path = cfg.out_dir.join("reference.csv");
            io::write_series_csv(&ref_path, &grid_times(cfg.dt, full_t_end)?, &values)?;
            files.push(ref_path);
            Some(values)
        }
        LossConfig::MaeWindow { t_start, t_end } => {
            summary.push(("loss_window_start".into(), SummaryValue::Float(*t_start)));
            summary.push(("loss_window_end".into(), SummaryValue::Float(*t_end)));
            None
        }
    };

    let param_paths: Vec<&str> = cfg.parameters.iter().map(|p| p.path.as_str()).collect();
    let lanes = cfg.parameters[0].initial.len();

    // Stage loop: each stage fits its prefix of the reference, then hands
    // every lane's best parameters to the next stage as starting points.
    let mut initials: Vec<Vec<f64>> = cfg.parameters.iter().map(|p| p.initial.clone()).collect();
    let mut first_sim: Option<(Vec<f64>, Vec<Vec<f64>>)> = None;
    let mut stage_traces: Vec<OptTrace> = Vec::new();
    let mut abort: Option<ExperimentError> = None;
    for stage in &cfg.stages {
        let n_samples = grid_times(cfg.dt, stage.t_end)?.len();
        let stage_reference = reference.as_deref().map(|r| &r[..n_samples]);
        let problem = OptProblem {
            params: cfg
                .parameters
                .iter()
                .enumerate()
                .map(|(p, spec)| ParamSpec {
                    name: spec.path.clone(),
                    initial: initials[p].clone(),
                    bounds: spec.bounds,
                    eta: spec.eta,
                    max_step: spec.max_step,
                })
                .collect(),
            epsilon: stage.epsilon,
            max_iterations: stage.max_iterations,
            loss_threshold: cfg.optimizer.loss_threshold,
        };
        let outcome = optimizer::optimize(&problem, |values| {
            match evaluate_batch(
                &cfg.model,
                &cfg.events,
                cfg.dt,
                stage.t_end,
                &cfg.loss,
                &signal,
                stage_reference,
                &param_paths,
                values,
            ) {
                Ok(b) => {
                    let result = Evaluation {
                        loss: b.loss,
                        grads: b.grads,
                    };
                    if first_sim.is_none() {
                        first_sim = Some((b.times, b.signal_values));
                    }
                    Ok(result)
                }
                Err(e) if is_recoverable(&e) => Ok(Evaluation {
                    loss: vec![f64::NAN; lanes],
                    grads: vec![vec![f64::NAN; lanes]; values.len()],
                }),
                Err(e) => Err(e),
            }
        });
        match outcome {
            Ok(trace) => {
                initials = trace.best_params.clone();
                stage_traces.push(trace);
            }
            Err(OptError::AllLanesFrozen { trace }) => {
                let trace = *trace;
                stage_traces.push(trace.clone());
                abort = Some(ExperimentError::Opt(OptError::AllLanesFrozen {
                    trace: Box::new(trace),
                }));
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }

    // Success or abort, the gathered rows are written out.
    let trace_path = cfg.out_dir.join("trace.csv");
    write_trace_csv(&trace_path, &param_paths, &stage_traces)?;
    files.push(trace_path);

    let trace = stage_traces.last().expect("at least one stage always runs");

    summary.push(("lanes".into(), SummaryValue::Int(lanes as i64)));
    summary.push(("stages".into(), SummaryValue::Int(cfg.stages.len() as i64)));
    summary.push((
        "iterations".into(),
        SummaryValue::Int(
            stage_traces
                .iter()
                .map(|t| t.iterations.len())
                .sum::<usize>() as i64,
        ),
    ));
    summary.push((
        "sims_in_loop".into(),
        SummaryValue::Int(stage_traces.iter().map(|t| t.sims_run).sum::<usize>() as i64),
    ));
    summary.push((
        "frozen_lanes".into(),
        SummaryValue::Int(trace.frozen.iter().filter(|f| **f).count() as i64),
    ));
    if cfg.stages.len() > 1 {
        for (s, (stage, t)) in cfg.stages.iter().zip(&stage_traces).enumerate() {
            summary.push((format!("stage{s}_t_end"), SummaryValue::Float(stage.t_end)));
            summary.push((
                format!("stage{s}_iterations"),
                SummaryValue::Int(t.iterations.len() as i64),
            ));
            summary.push((
                format!("stage{s}_termination"),
                SummaryValue::Text(termination_name(t.termination).into()),
            ));
        }
    }

    if abort.is_none() {
        let best = trace.best_lane;
        summary.push((
            "termination".into(),
            SummaryValue::Text(termination_name(trace.termination).into()),
        ));
        summary.push(("best_lane".into(), SummaryValue::Int(best as i64)));

        // First-stage starting loss of the winning lane; comparable to the
        // final loss only when a single stage ran (one fitting window).
        let initial_loss = stage_traces
            .first()
            .and_then(|t| t.iterations.first())
            .map(|it| it.loss[best])
            .unwrap_or(f64::NAN);
        let final_loss = trace.best_loss[best];
        summary.push(("initial_loss".into(), SummaryValue::Float(initial_loss)));
        summary.push(("final_loss".into(), SummaryValue::Float(final_loss)));
        if cfg.stages.len() == 1
            && initial_loss.is_finite()
            && initial_loss > 0.0
            && final_loss.is_finite()
        {
            summary.push((
                "loss_reduction_pct".into(),
                SummaryValue::Float(100.0 * (1.0 - final_loss / initial_loss)),
            ));
        }
        summary.push((
            "final_loss_lanes".into(),
            float_list(trace.best_loss.iter().copied()),
        ));

        for (p, param) in cfg.parameters.iter().enumerate() {
            let key = key_of(&param.path);
            let final_value = trace.best_params[p][best];
            summary.push((
                format!("initial_{key}"),
                SummaryValue::Float(param.initial[best]),
            ));
            summary.push((format!("final_{key}"), SummaryValue::Float(final_value)));
            summary.push((
                format!("final_{key}_lanes"),
                float_list(trace.best_params[p].iter().copied()),
            ));
            if let Some((_, truth)) = truth_pairs.iter().find(|(path, _)| *path == param.path) {
                summary.push((format!("truth_value_{key}"), SummaryValue::Float(*truth)));
                if *truth != 0.0 {
                    summary.push((
                        format!("error_pct_{key}"),
                        SummaryValue::Float(100.0 * (final_value - truth).abs() / truth.abs()),
                    ));
                } else {
                    summary.push((
                        format!("error_abs_{key}"),
                        SummaryValue::Float((final_value - truth).abs()),
                    ));
                }
            }
        }

        // Trajectory snapshots: the first evaluation (initial guesses, best
        // lane) and a fresh run at the best parameters.
        if let Some((times, sig)) = &first_sim {
            let initial_series: Vec<f64> = sig.iter().map(|s| s[best]).collect();
            let path = cfg.out_dir.join("trajectory_initial.csv");
            io::write_series_csv(&path, times, &initial_series)?;
            files.push(path);
        }
        let best_overrides: Vec<(String, f64)> = cfg
            .parameters
            .iter()
            .enumerate()
            .map(|(p, param)| (param.path.clone(), trace.best_params[p][best]))
            .collect();
        match simulate_signal(
            &cfg.model,
            &cfg.events,
            cfg.dt,
            full_t_end,
            &best_overrides,
            &signal,
        ) {
            Ok((times, values)) => {
                let path = cfg.out_dir.join("trajectory_final.csv");
                io::write_series_csv(&path, &times, &values)?;
                files.push(path);
            }
            Err(e) => {
                // Best parameters produced a finite loss, so this is not
                // expected; record it rather than fail the whole run.
                summary.push((
                    "final_snapshot_error".into(),
                    SummaryValue::Text(e.to_string()),
                ));
            }
        }
    } else {
        summary.push((
            "termination".into(),
            SummaryValue::Text("aborted_all_lanes_frozen".into()),
        ));
    }

    summary.push((
        "wall_time_s".into(),
        SummaryValue::Float(started.elapsed().as_secs_f64()),
    ));
    let summary_path = cfg.out_dir.join("summary.toml");
    io::write_summary(&summary_path, &summary)?;
    files.push(summary_path);

    match abort {
        Some(e) => Err(e),
        None => Ok(RunReport {
            out_dir: cfg.out_dir.clone(),
            summary,
            files,
        }),
    }
}

fn run_scan(cfg: &ExperimentConfig) -> Result<RunReport, ExperimentError> {
    let started = Instant::now();
    let mut summary = base_summary(cfg);
    let mut files = Vec::new();
    let scan = cfg
        .scan
        .as_ref()
        .expect("scan experiments carry a [scan] table after validation");

    let signal = match &cfg.reference {
        Some(rc) => rc.signal.clone(),
        None => {
            let gen = cfg
                .model
                .generators
                .iter()
                .find(|g| !g.slack)
                .or(cfg.model.generators.first())
                .ok_or_else(|| SimError::Validation("system has no generators".into()))?;
            format!("{}.delta_omega", gen.name)
        }
    };
    summary.push(("signal".into(), SummaryValue::Text(signal.clone())));

    let reference = match &cfg.loss {
        LossConfig::Mse => {
            let rc = cfg.reference.as_ref().ok_or_else(|| {
                ExperimentError::Opt(OptError::Validation(
                    "mse loss needs a [reference] table".into(),
                ))
            })?;
            let (values, entries) = prepare_reference(cfg, rc, cfg.t_end)?;
            summary.extend(entries);
            Some(values)
        }
        LossConfig::MaeWindow { .. } => None,
    };

    let params: Vec<(String, f64)> = scan
        .parameters
        .iter()
        .map(|p| {
            cfg.model
                .resolve_param(p)
                .map(|r| (p.clone(), r.nominal))
                .map_err(ExperimentError::from)
        })
        .collect::<Result<_, _>>()?;
    let fractions = optimizer::scan_fractions(scan.lo, scan.hi, scan.points);

    let rows: Vec<ScanRow> = optimizer::landscape_scan(&params, &fractions, |name, values| {
        let mut loss = Vec::with_capacity(values.len());
        let mut grad = Vec::with_capacity(values.len());
        for chunk in values.chunks(scan.lanes_per_batch) {
            match evaluate_batch(
                &cfg.model,
                &cfg.events,
                cfg.dt,
                cfg.t_end,
                &cfg.loss,
                &signal,
                reference.as_deref(),
                &[name],
                &[chunk.to_vec()],
            ) {
                Ok(b) => {
                    loss.extend(b.loss);
                    grad.extend(b.grads[0].iter().copied());
                }
                Err(e) if is_recoverable(&e) => {
                    loss.extend(std::iter::repeat(f64::NAN).take(chunk.len()));
                    grad.extend(std::iter::repeat(f64::NAN).take(chunk.len()));
                }
                Err(e) => return Err(e),
            }
        }
        Ok((loss, grad))
    })?;

    let mut csv_rows = Vec::new();
    for row in &rows {
        for i in 0..row.fractions.len() {
            csv_rows.push(format!(
                "{},{},{},{},{},{}",
                row.param, row.fractions[i], row.values[i], row.loss[i], row.grad[i], row.descent[i]
            ));
        }
    }
    let scan_path = cfg.out_dir.join("scan.csv");
    io::write_csv(
        &scan_path,
        "parameter,fraction,value,loss,grad,descent_normalized",
        csv_rows,
    )?;
    files.push(scan_path);

    summary.push(("parameters".into(), SummaryValue::Int(rows.len() as i64)));
    summary.push(("grid_points".into(), SummaryValue::Int(fractions.len() as i64)));
    for row in &rows {
        summary.push((
            format!("interior_sign_changes_{}", key_of(&row.param)),
            SummaryValue::Int(row.interior_sign_changes as i64),
        ));
        let unstable = row.loss.iter().filter(|l| !l.is_finite()).count();
        if unstable > 0 {
            summary.push((
                format!("unstable_cells_{}", key_of(&row.param)),
                SummaryValue::Int(unstable as i64),
            ));
        }
    }
    summary.push((
        "wall_time_s".into(),
        SummaryValue::Float(started.elapsed().as_secs_f64()),
    ));

    let summary_path = cfg.out_dir.join("summary.toml");
    io::write_summary(&summary_path, &summary)?;
    files.push(summary_path);

    Ok(RunReport {
        out_dir: cfg.out_dir.clone(),
        summary,
        files,
    })
}
