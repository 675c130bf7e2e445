//! Loss functions, step-clipped gradient descent, and the landscape scan.
//!
//! The descent loop is deliberately frugal: every iteration costs exactly
//! one forward simulation and one backward sweep, regardless of how many
//! parameters are being optimized. Rejected steps revert to the best
//! parameters seen so far and reuse their stored gradients at a halved
//! learning rate, so even the backtracking never re-simulates.
//!
//! The optimizer itself never touches a tape: it drives an evaluation
//! callback that maps parameter values (one vector per lane) to per-lane
//! losses and per-parameter, per-lane gradients. That keeps the loop unit
//! testable against synthetic functions and keeps all tape lifetimes inside
//! the callback.

use crate::simulator::{grid_index, SimError, Trajectory};
use crate::tape::{ADScalar, Tape};
use std::fmt;

#[derive(Debug)]
pub enum OptError {
    Validation(String),
    Sim(SimError),
    /// No lane ever produced a finite loss; diagnostic trace attached.
    AllLanesFrozen { trace: Box<OptTrace> },
}

impl fmt::Display for OptError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptError::Validation(msg) => write!(f, "invalid optimization problem: {msg}"),
            OptError::Sim(e) => write!(f, "{e}"),
            OptError::AllLanesFrozen { trace } => write!(
                f,
                "every lane produced non-finite losses or gradients (after {} iterations)",
                trace.iterations.len()
            ),
        }
    }
}

impl std::error::Error for OptError {}

impl From<SimError> for OptError {
    fn from(e: SimError) -> Self {
        OptError::Sim(e)
    }
}

/// Mean squared error between a simulated signal and a reference series on
/// the same grid, per lane: `(1/N) sum (ref_t - sim_t)^2`.
pub fn loss_mse(sim: &[ADScalar], reference: &[f64], tape: &Tape) -> Result<ADScalar, OptError> {
    if sim.len() != reference.len() {
        return Err(OptError::Validation(format!(
            "loss needs equal grids: simulation has {} samples, reference {}",
            sim.len(),
            reference.len()
        )));
    }
    if sim.is_empty() {
        return Err(OptError::Validation("loss over an empty series".into()));
    }
    let mut acc = tape.constant(0.0);
    for (s, r) in sim.iter().zip(reference) {
        let e = &tape.constant(*r) - s;
        acc = &acc + &(&e * &e);
    }
    Ok(&acc * (1.0 / sim.len() as f64))
}

/// Mean absolute value of a signal over a time window, per lane:
/// `(1/N) sum |sim_t|` for `t_start <= t <= t_end`.
pub fn loss_mae_window(
    traj: &Trajectory,
    signal: &str,
    t_start: f64,
    t_end: f64,
    tape: &Tape,
) -> Result<ADScalar, OptError> {
    let nodes = traj.signal(signal).ok_or_else(|| {
        OptError::Validation(format!("trajectory has no signal named {signal:?}"))
    })?;
    if !(t_start < t_end) {
        return Err(OptError::Validation(format!(
            "window [{t_start}, {t_end}] is empty"
        )));
    }
    let k0 = grid_index(t_start, traj.dt).ok_or_else(|| {
        OptError::Validation(format!(
            "window start {t_start} is not on the dt = {} grid",
            traj.dt
        ))
    })?;
    let k1 = grid_index(t_end, traj.dt).ok_or_else(|| {
        OptError::Validation(format!(
            "window end {t_end} is not on the dt = {} grid",
            traj.dt
        ))
    })?;
    if k1 >= nodes.len() {
        return Err(OptError::Validation(format!(
            "window end {t_end} is beyond the trajectory ({} samples of {})",
            nodes.len(),
            traj.dt
        )));
    }
    let window = &nodes[k0..=k1];
    let mut acc = tape.constant(0.0);
    for s in window {
        acc = &acc + &s.abs();
    }
    Ok(&acc * (1.0 / window.len() as f64))
}

/// One optimizable parameter: initial guesses (one per lane), optional box
/// bounds, and absolute step-sizing constants.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub initial: Vec<f64>,
    pub bounds: Option<(f64, f64)>,
    /// Base learning rate, in parameter units per unit gradient.
    pub eta: f64,
    /// Hard cap on one iteration's parameter change.
    pub max_step: f64,
}

#[derive(Debug, Clone)]
pub struct OptProblem {
    pub params: Vec<ParamSpec>,
    /// Convergence threshold on the largest parameter change.
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Optional early stop when the best lane's loss drops this low.
    pub loss_threshold: Option<f64>,
}

impl OptProblem {
    pub fn validate(&self) -> Result<usize, OptError> {
        let err = |msg: String| Err(OptError::Validation(msg));
        if self.params.is_empty() {
            return err("no parameters to optimize".into());
        }
        let lanes = self.params[0].initial.len();
        if lanes == 0 {
            return err("parameter guess vectors are empty".into());
        }
        for p in &self.params {
            if p.initial.len() != lanes {
                return err(format!(
                    "parameter {} has {} initial guesses but {} has {}",
                    p.name,
                    p.initial.len(),
                    self.params[0].name,
                    lanes
                ));
            }
            if !(p.eta > 0.0) {
                return err(format!("parameter {}: eta must be positive", p.name));
            }
            if !(p.max_step > 0.0) {
                return err(format!("parameter {}: max_step must be positive", p.name));
            }
            if let Some((lo, hi)) = p.bounds {
                if !(lo < hi) {
                    return err(format!(
                        "parameter {}: bounds [{lo}, {hi}] are out of order",
                        p.name
                    ));
                }
                if p.initial.iter().any(|v| *v < lo || *v > hi) {
                    return err(format!(
                        "parameter {}: an initial guess lies outside [{lo}, {hi}]",
                        p.name
                    ));
                }
            }
        }
        if !(self.epsilon > 0.0) {
            return err("epsilon must be positive".into());
        }
        if self.max_iterations == 0 {
            return err("max_iterations must be at least 1".into());
        }
        Ok(lanes)
    }
}

/// One descent update: `new = value - clamp(eta * grad, +-max_step)`,
/// projected onto the bounds. Returns the new value and the applied change.
pub fn clipped_step(
    value: f64,
    grad: f64,
    eta: f64,
    max_step: f64,
    bounds: Option<(f64, f64)>,
) -> (f64, f64) {
    let step = (eta * grad).clamp(-max_step, max_step);
    let mut new = value - step;
    if let Some((lo, hi)) = bounds {
        new = new.clamp(lo, hi);
    }
    (new, new - value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Largest parameter change fell below epsilon.
    ParamTolerance,
    /// Best lane's loss reached the configured threshold.
    LossThreshold,
    MaxIterations,
}

/// Everything recorded about one iteration (values refer to the evaluated
/// parameters, before the step taken at the end of the iteration).
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub loss: Vec<f64>,
    /// `[param][lane]` values the loss was evaluated at.
    pub params: Vec<Vec<f64>>,
    /// `[param][lane]` gradients at those values.
    pub grads: Vec<Vec<f64>>,
    /// `[param][lane]` change applied after the evaluation.
    pub step: Vec<Vec<f64>>,
    /// Per lane: whether this evaluation improved on the best loss so far.
    pub accepted: Vec<bool>,
    /// Per lane learning-rate adaptation factor after this iteration.
    pub eta_scale: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OptTrace {
    pub iterations: Vec<IterationRecord>,
    pub termination: Termination,
    /// Best-seen parameters per `[param][lane]`.
    pub best_params: Vec<Vec<f64>>,
    /// Best-seen loss per lane (infinite for lanes that never went finite).
    pub best_loss: Vec<f64>,
    /// Lane with the lowest best loss.
    pub best_lane: usize,
    /// Lanes that never produced a finite loss and gradient set.
    pub frozen: Vec<bool>,
    /// Forward simulations performed (one per iteration by construction).
    pub sims_run: usize,
}

impl OptTrace {
    pub fn best_value(&self, param_index: usize) -> f64 {
        self.best_params[param_index][self.best_lane]
    }
}

/// Per-lane evaluation result handed back by the simulation callback.
pub struct Evaluation {
    /// Loss per lane.
    pub loss: Vec<f64>,
    /// Gradient per `[param][lane]`.
    pub grads: Vec<Vec<f64>>,
}

/// Gradient descent with step clipping, per-lane accept/reject learning-rate
/// adaptation, and frozen-lane bookkeeping.
///
/// `eval` receives `[param][lane]` values and must return the per-lane loss
/// and gradients from ONE forward simulation and ONE backward sweep; the
/// optimizer counts calls and never requests more than one per iteration.
/// Lanes whose loss or gradients go non-finite are not stepped; they revert
/// to their best parameters at a halved learning rate, which recovers lanes
/// that stepped into an unstable region. Lanes that have never been finite
/// stay frozen at their initial guesses.
///
/// Steps use gradients normalized by each lane's first finite loss. The
/// loss's absolute magnitude is arbitrary (squared per-unit deviations can
/// sit at 1e-6 before any fitting), so raw-gradient steps with one default
/// rate would be arbitrarily tiny or huge; dividing by the initial loss
/// makes `eta` mean "fraction of the parameter scale moved per unit of
/// relative loss slope". Direction, gradient signs, and the best-lane
/// choice under positive loss rescaling are unaffected, and an
/// already-optimal lane still sees a zero gradient and stops immediately.
pub fn optimize(
    problem: &OptProblem,
    mut eval: impl FnMut(&[Vec<f64>]) -> Result<Evaluation, OptError>,
) -> Result<OptTrace, OptError> {
    let lanes = problem.validate()?;
    let np = problem.params.len();

    let mut current: Vec<Vec<f64>> = problem.params.iter().map(|p| p.initial.clone()).collect();
    let mut best_params = current.clone();
    let mut best_loss = vec![f64::INFINITY; lanes];
    let mut best_grads: Vec<Vec<f64>> = vec![vec![0.0; lanes]; np];
    let mut eta_scale = vec![1.0f64; lanes];
    // Per-lane gradient normalizer: the first finite loss, fixed thereafter.
    let mut loss_scale = vec![1.0f64; lanes];
    let mut ever_finite = vec![false; lanes];

    let mut iterations: Vec<IterationRecord> = Vec::new();
    let mut sims_run = 0usize;
    let mut termination = Termination::MaxIterations;

    for _ in 0..problem.max_iterations {
        let evaluation = eval(&current)?;
        sims_run += 1;
        if evaluation.loss.len() != lanes || evaluation.grads.len() != np {
            return Err(OptError::Validation(format!(
                "evaluation shape mismatch: got {} losses / {} gradient rows, expected {lanes} / {np}",
                evaluation.loss.len(),
                evaluation.grads.len()
            )));
        }

        // Accept or reject per lane, and choose the point to step from:
        // the just-evaluated point when accepted, the stored best otherwise.
        let mut accepted = vec![false; lanes];
        let mut step_from = vec![vec![0.0f64; lanes]; np];
        let mut step_grads = vec![vec![0.0f64; lanes]; np];
        for lane in 0..lanes {
            let finite = evaluation.loss[lane].is_finite()
                && evaluation.grads.iter().all(|g| g[lane].is_finite());
            if finite && evaluation.loss[lane] <= best_loss[lane] {
                accepted[lane] = true;
                if !ever_finite[lane] {
                    ever_finite[lane] = true;
                    loss_scale[lane] = evaluation.loss[lane].abs().max(f64::MIN_POSITIVE);
                }
                best_loss[lane] = evaluation.loss[lane];
                eta_scale[lane] *= 1.25;
                for p in 0..np {
                    best_params[p][lane] = current[p][lane];
                    best_grads[p][lane] = evaluation.grads[p][lane];
                }
            } else {
                // Worse or non-finite: halve the rate and restart from the
                // best point with its stored gradients (no extra simulation).
                eta_scale[lane] *= 0.5;
            }
            for p in 0..np {
                step_from[p][lane] = best_params[p][lane];
                step_grads[p][lane] = best_grads[p][lane];
            }
        }

        if !ever_finite.iter().any(|f| *f) {
            let frozen = vec![true; lanes];
            let trace = OptTrace {
                iterations,
                termination: Termination::MaxIterations,
                best_params,
                best_loss,
                best_lane: 0,
                frozen,
                sims_run,
            };
            return Err(OptError::AllLanesFrozen {
                trace: Box::new(trace),
            });
        }

        // Step every lane that has a finite base point.
        let mut next = step_from.clone();
        let mut steps = vec![vec![0.0f64; lanes]; np];
        let mut max_change = 0.0f64;
        for lane in 0..lanes {
            if !ever_finite[lane] {
                continue;
            }
            for (p, spec) in problem.params.iter().enumerate() {
                let (new, applied) = clipped_step(
                    step_from[p][lane],
                    step_grads[p][lane] / loss_scale[lane],
                    spec.eta * eta_scale[lane],
                    spec.max_step,
                    spec.bounds,
                );
                next[p][lane] = new;
                steps[p][lane] = applied;
                max_change = max_change.max(applied.abs());
            }
        }

        iterations.push(IterationRecord {
            loss: evaluation.loss,
            params: current.clone(),
            grads: evaluation.grads,
            step: steps,
            accepted,
            eta_scale: eta_scale.clone(),
        });
        current = next;

        let best_lane_loss = best_loss.iter().cloned().fold(f64::INFINITY, f64::min);
        if let Some(threshold) = problem.loss_threshold {
            if best_lane_loss <= threshold {
                termination = Termination::LossThreshold;
                break;
            }
        }
        if max_change < problem.epsilon {
            termination = Termination::ParamTolerance;
            break;
        }
    }

    let frozen: Vec<bool> = ever_finite.iter().map(|f| !f).collect();
    let best_lane = (0..lanes)
        .min_by(|&a, &b| best_loss[a].total_cmp(&best_loss[b]))
        .unwrap_or(0);
    Ok(OptTrace {
        iterations,
        termination,
        best_params,
        best_loss,
        best_lane,
        frozen,
        sims_run,
    })
}

/// One parameter's row of the loss landscape.
#[derive(Debug, Clone)]
pub struct ScanRow {
    pub param: String,
    pub nominal: f64,
    /// Grid positions as fractions of nominal.
    pub fractions: Vec<f64>,
    /// Absolute parameter values scanned.
    pub values: Vec<f64>,
    /// Loss at each value; non-finite where the simulation was unstable.
    pub loss: Vec<f64>,
    /// Raw loss gradient dL/dtheta at each value.
    pub grad: Vec<f64>,
    /// Descent direction `-dL/dtheta`, normalized by the row's largest
    /// magnitude: positive means increasing the parameter reduces the loss.
    pub descent: Vec<f64>,
    /// Sign changes of the descent direction away from the nominal point,
    /// i.e. local optima other than the expected one.
    pub interior_sign_changes: usize,
}

/// Counts descent-direction sign flips whose bracketing interval does not
/// contain the nominal point (fraction 1). Entries below `tol` (relative to
/// the row maximum) and non-finite entries are skipped, not counted.
fn interior_sign_changes(fractions: &[f64], descent: &[f64], tol: f64) -> usize {
    let max_mag = descent
        .iter()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if max_mag == 0.0 {
        return 0;
    }
    let mut count = 0;
    let mut last: Option<(f64, f64)> = None; // (fraction, sign)
    for (f, d) in fractions.iter().zip(descent) {
        if !d.is_finite() || d.abs() < tol * max_mag {
            continue;
        }
        let sign = d.signum();
        if let Some((f_prev, s_prev)) = last {
            if sign != s_prev && !(f_prev <= 1.0 && 1.0 <= *f) {
                count += 1;
            }
        }
        last = Some((*f, sign));
    }
    count
}

/// Scans each parameter independently over `fractions` of its nominal value
/// (the others stay nominal). `eval` maps a batch of absolute values for one
/// parameter to (loss, gradient) pairs; unstable points must come back as
/// non-finite entries rather than errors.
pub fn landscape_scan(
    params: &[(String, f64)],
    fractions: &[f64],
    mut eval: impl FnMut(&str, &[f64]) -> Result<(Vec<f64>, Vec<f64>), OptError>,
) -> Result<Vec<ScanRow>, OptError> {
    if fractions.len() < 3 {
        return Err(OptError::Validation(format!(
            "scan grid needs at least 3 points, got {}",
            fractions.len()
        )));
    }
    let mut rows = Vec::with_capacity(params.len());
    for (name, nominal) in params {
        let values: Vec<f64> = fractions.iter().map(|f| f * nominal).collect();
        let (loss, grad) = eval(name, &values)?;
        if loss.len() != values.len() || grad.len() != values.len() {
            return Err(OptError::Validation(format!(
                "scan evaluation for {name} returned {} losses / {} gradients for {} points",
                loss.len(),
                grad.len(),
                values.len()
            )));
        }
        let descent_raw: Vec<f64> = grad.iter().map(|g| -g).collect();
        let max_mag = descent_raw
            .iter()
            .filter(|v| v.is_finite())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let descent: Vec<f64> = if max_mag > 0.0 {
            descent_raw.iter().map(|v| v / max_mag).collect()
        } else {
            descent_raw
        };
        let sign_changes = interior_sign_changes(fractions, &descent, 1e-6);
        rows.push(ScanRow {
            param: name.clone(),
            nominal: *nominal,
            fractions: fractions.to_vec(),
            values,
            loss,
            grad,
            descent,
            interior_sign_changes: sign_changes,
        });
    }
    Ok(rows)
}

/// Evenly spaced scan fractions from `lo` to `hi` inclusive.
pub fn scan_fractions(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points <= 1 {
        return vec![lo];
    }
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}
