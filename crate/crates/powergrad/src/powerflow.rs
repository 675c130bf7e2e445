//! Steady-state power flow on plain numbers.
//!
//! Newton-Raphson in polar coordinates over the branch-only admittance
//! matrix: generators appear as PV injections (or the slack), never as
//! admittances. The solution fixes every generator's terminal voltage and
//! complex power, which is all the dynamic initializer needs; because those
//! terminal quantities do not depend on any machine parameter, they enter
//! the tape as constants without losing gradient information.

use num_complex::Complex64;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum PfError {
    /// Matrix shape does not match the bus list.
    Dimension,
    /// Not exactly one slack bus.
    SlackCount(usize),
    /// Newton iteration exceeded the cap or produced non-finite values.
    Diverged { iterations: usize, mismatch: f64 },
    /// The Jacobian lost rank (typically an isolated bus).
    SingularJacobian { iteration: usize },
}

impl fmt::Display for PfError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PfError::Dimension => write!(f, "admittance matrix size does not match bus count"),
            PfError::SlackCount(n) => {
                write!(f, "power flow needs exactly one slack bus, found {n}")
            }
            PfError::Diverged {
                iterations,
                mismatch,
            } => write!(
                f,
                "power flow diverged: mismatch {mismatch:.3e} after {iterations} iterations \
                 (operating point may be infeasible)"
            ),
            PfError::SingularJacobian { iteration } => {
                write!(f, "power-flow Jacobian singular at iteration {iteration}")
            }
        }
    }
}

impl std::error::Error for PfError {}

/// Electrical role of a bus in the power flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PfBusKind {
    /// Fixed voltage magnitude and zero angle; absorbs the power balance.
    Slack { v: f64 },
    /// Fixed active-power injection and voltage magnitude.
    Pv { p: f64, v: f64 },
    /// Fixed complex-power injection (zero for a passive junction).
    Pq { p: f64, q: f64 },
}

#[derive(Debug, Clone)]
pub struct PfSolution {
    /// Bus voltages.
    pub v: Vec<Complex64>,
    /// Net injected complex power per bus, system base.
    pub s: Vec<Complex64>,
    pub iterations: usize,
    /// Final infinity-norm power mismatch.
    pub mismatch: f64,
}

pub const PF_MAX_ITER: usize = 50;
pub const PF_TOL: f64 = 1e-12;

/// Dense Gaussian elimination with partial pivoting; `a` is row-major n x n,
/// consumed along with `b`.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot_row = (col..n).max_by(|&r, &s| {
            a[r * n + col]
                .abs()
                .partial_cmp(&a[s * n + col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if a[pivot_row * n + col].abs() < 1e-12 {
            return None;
        }
        if pivot_row != col {
            for k in 0..n {
                a.swap(col * n + k, pivot_row * n + k);
            }
            b.swap(col, pivot_row);
        }
        let pivot = a[col * n + col];
        for row in (col + 1)..n {
            let factor = a[row * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in (row + 1)..n {
            acc -= a[row * n + k] * b[k];
        }
        b[row] = acc / a[row * n + row];
    }
    Some(b)
}

/// Newton-Raphson power flow over a dense row-major admittance matrix.
pub fn solve_power_flow(y: &[Complex64], buses: &[PfBusKind]) -> Result<PfSolution, PfError> {
    let n = buses.len();
    if y.len() != n * n {
        return Err(PfError::Dimension);
    }
    let slack_count = buses
        .iter()
        .filter(|b| matches!(b, PfBusKind::Slack { .. }))
        .count();
    if slack_count != 1 {
        return Err(PfError::SlackCount(slack_count));
    }

    let mut theta = vec![0.0f64; n];
    let mut vm: Vec<f64> = buses
        .iter()
        .map(|b| match *b {
            PfBusKind::Slack { v } | PfBusKind::Pv { v, .. } => v,
            PfBusKind::Pq { .. } => 1.0,
        })
        .collect();

    // Rows of the Newton system: P mismatch for every non-slack bus, then Q
    // mismatch for every PQ bus.
    let ang_rows: Vec<usize> = (0..n)
        .filter(|&i| !matches!(buses[i], PfBusKind::Slack { .. }))
        .collect();
    let vm_rows: Vec<usize> = (0..n)
        .filter(|&i| matches!(buses[i], PfBusKind::Pq { .. }))
        .collect();
    let m = ang_rows.len() + vm_rows.len();

    let g = |i: usize, k: usize| y[i * n + k].re;
    let b = |i: usize, k: usize| y[i * n + k].im;

    let mut mismatch_norm = f64::INFINITY;
    for iteration in 0..=PF_MAX_ITER {
        // Injected P, Q at the current state.
        let mut p_calc = vec![0.0f64; n];
        let mut q_calc = vec![0.0f64; n];
        for i in 0..n {
            for k in 0..n {
                let t = theta[i] - theta[k];
                let (st, ct) = t.sin_cos();
                p_calc[i] += vm[i] * vm[k] * (g(i, k) * ct + b(i, k) * st);
                q_calc[i] += vm[i] * vm[k] * (g(i, k) * st - b(i, k) * ct);
            }
        }

        let mut f = Vec::with_capacity(m);
        for &i in &ang_rows {
            let p_set = match buses[i] {
                PfBusKind::Pv { p, .. } => p,
                PfBusKind::Pq { p, .. } => p,
                PfBusKind::Slack { .. } => unreachable!(),
            };
            f.push(p_set - p_calc[i]);
        }
        for &i in &vm_rows {
            let q_set = match buses[i] {
                PfBusKind::Pq { q, .. } => q,
                _ => unreachable!(),
            };
            f.push(q_set - q_calc[i]);
        }
        mismatch_norm = f.iter().fold(0.0f64, |mx, v| mx.max(v.abs()));
        if !mismatch_norm.is_finite() {
            return Err(PfError::Diverged {
                iterations: iteration,
                mismatch: mismatch_norm,
            });
        }
        if mismatch_norm < PF_TOL {
            let v: Vec<Complex64> = (0..n)
                .map(|i| Complex64::from_polar(vm[i], theta[i]))
                .collect();
            let s: Vec<Complex64> = (0..n)
                .map(|i| Complex64::new(p_calc[i], q_calc[i]))
                .collect();
            return Ok(PfSolution {
                v,
                s,
                iterations: iteration,
                mismatch: mismatch_norm,
            });
        }
        if iteration == PF_MAX_ITER {
            break;
        }

        // Jacobian of [P; Q] with respect to [theta; Vm], standard polar form.
        let mut jac = vec![0.0f64; m * m];
        let dp_dth = |i: usize, j: usize| {
            if i == j {
                -q_calc[i] - b(i, i) * vm[i] * vm[i]
            } else {
                let t = theta[i] - theta[j];
                vm[i] * vm[j] * (g(i, j) * t.sin() - b(i, j) * t.cos())
            }
        };
        let dp_dv = |i: usize, j: usize| {
            if i == j {
                p_calc[i] / vm[i] + g(i, i) * vm[i]
            } else {
                let t = theta[i] - theta[j];
                vm[i] * (g(i, j) * t.cos() + b(i, j) * t.sin())
            }
        };
        let dq_dth = |i: usize, j: usize| {
            if i == j {
                p_calc[i] - g(i, i) * vm[i] * vm[i]
            } else {
                let t = theta[i] - theta[j];
                -vm[i] * vm[j] * (g(i, j) * t.cos() + b(i, j) * t.sin())
            }
        };
        let dq_dv = |i: usize, j: usize| {
            if i == j {
                q_calc[i] / vm[i] - b(i, i) * vm[i]
            } else {
                let t = theta[i] - theta[j];
                vm[i] * (g(i, j) * t.sin() - b(i, j) * t.cos())
            }
        };
        for (r, &i) in ang_rows.iter().enumerate() {
            for (c, &j) in ang_rows.iter().enumerate() {
                jac[r * m + c] = dp_dth(i, j);
            }
            for (c, &j) in vm_rows.iter().enumerate() {
                jac[r * m + ang_rows.len() + c] = dp_dv(i, j);
            }
        }
        for (r, &i) in vm_rows.iter().enumerate() {
            let row = ang_rows.len() + r;
            for (c, &j) in ang_rows.iter().enumerate() {
                jac[row * m + c] = dq_dth(i, j);
            }
            for (c, &j) in vm_rows.iter().enumerate() {
                jac[row * m + ang_rows.len() + c] = dq_dv(i, j);
            }
        }

        let dx = solve_dense(jac, f).ok_or(PfError::SingularJacobian { iteration })?;
        for (c, &i) in ang_rows.iter().enumerate() {
            theta[i] += dx[c];
        }
        for (c, &i) in vm_rows.iter().enumerate() {
            vm[i] += dx[ang_rows.len() + c];
        }
        if theta.iter().chain(vm.iter()).any(|v| !v.is_finite()) {
            return Err(PfError::Diverged {
                iterations: iteration + 1,
                mismatch: mismatch_norm,
            });
        }
    }
    Err(PfError::Diverged {
        iterations: PF_MAX_ITER,
        mismatch: mismatch_norm,
    })
}
