//! Complex phasors whose real and imaginary parts are tape nodes, plus the
//! algebraic network solve `Y V = I`.
//!
//! The solver is plain Gaussian elimination with partial pivoting. Pivot
//! rows are chosen by squared magnitude so no square root ever lands on the
//! tape; the comparison itself happens on detached values because a discrete
//! choice carries no gradient. Everything else (elimination factors, row
//! updates, back-substitution) is recorded, so voltage sensitivities flow
//! back into admittance entries, including machine admittances that depend
//! on scanned parameters.

use crate::tape::{ADScalar, AdError, Tape};
use std::fmt;

#[derive(Debug, Clone)]
pub struct Phasor {
    pub re: ADScalar,
    pub im: ADScalar,
}

impl Phasor {
    pub fn new(re: ADScalar, im: ADScalar) -> Phasor {
        Phasor { re, im }
    }

    pub fn constant(tape: &Tape, re: f64, im: f64) -> Phasor {
        Phasor {
            re: tape.constant(re),
            im: tape.constant(im),
        }
    }

    pub fn zero(tape: &Tape) -> Phasor {
        Phasor::constant(tape, 0.0, 0.0)
    }

    pub fn conj(&self) -> Phasor {
        Phasor {
            re: self.re.clone(),
            im: -&self.im,
        }
    }

    pub fn scale(&self, k: f64) -> Phasor {
        Phasor {
            re: &self.re * k,
            im: &self.im * k,
        }
    }

    /// Multiply by a real tape node.
    pub fn scale_node(&self, k: &ADScalar) -> Phasor {
        Phasor {
            re: &self.re * k,
            im: &self.im * k,
        }
    }

    /// Multiply by `j` (rotate +90 degrees); no new arithmetic beyond a negation.
    pub fn mul_j(&self) -> Phasor {
        Phasor {
            re: -&self.im,
            im: self.re.clone(),
        }
    }

    pub fn abs2(&self) -> ADScalar {
        &(&self.re * &self.re) + &(&self.im * &self.im)
    }

    pub fn magnitude(&self) -> Result<ADScalar, AdError> {
        self.abs2().sqrt_pos()
    }

    /// Checked complex division; reports the first lane whose divisor is
    /// exactly zero.
    pub fn div(&self, rhs: &Phasor) -> Result<Phasor, AdError> {
        let d = rhs.abs2();
        if let Some(lane) = d.values().iter().position(|v| *v == 0.0) {
            return Err(AdError::DivByZero { lane });
        }
        let num = self * &rhs.conj();
        Ok(Phasor {
            re: &num.re / &d,
            im: &num.im / &d,
        })
    }

    pub fn value(&self, lane: usize) -> (f64, f64) {
        (self.re.value(lane), self.im.value(lane))
    }

    pub fn abs2_value(&self, lane: usize) -> f64 {
        let (r, i) = self.value(lane);
        r * r + i * i
    }
}

impl std::ops::Add<&Phasor> for &Phasor {
    type Output = Phasor;
    fn add(self, rhs: &Phasor) -> Phasor {
        Phasor {
            re: &self.re + &rhs.re,
            im: &self.im + &rhs.im,
        }
    }
}

impl std::ops::Sub<&Phasor> for &Phasor {
    type Output = Phasor;
    fn sub(self, rhs: &Phasor) -> Phasor {
        Phasor {
            re: &self.re - &rhs.re,
            im: &self.im - &rhs.im,
        }
    }
}

impl std::ops::Mul<&Phasor> for &Phasor {
    type Output = Phasor;
    fn mul(self, rhs: &Phasor) -> Phasor {
        Phasor {
            re: &(&self.re * &rhs.re) - &(&self.im * &rhs.im),
            im: &(&self.re * &rhs.im) + &(&self.im * &rhs.re),
        }
    }
}

impl std::ops::Neg for &Phasor {
    type Output = Phasor;
    fn neg(self) -> Phasor {
        Phasor {
            re: -&self.re,
            im: -&self.im,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NetError {
    Dimension { expected: usize, got: usize },
    BusOutOfRange { bus: usize, n_bus: usize },
    /// Effective pivot magnitude fell below 1e-12 during elimination.
    Singular { lane: usize, step: usize },
    Ad(AdError),
}

impl fmt::Display for NetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetError::Dimension { expected, got } => {
                write!(f, "expected {expected} entries, got {got}")
            }
            NetError::BusOutOfRange { bus, n_bus } => {
                write!(f, "bus index {bus} out of range for {n_bus} buses")
            }
            NetError::Singular { lane, step } => write!(
                f,
                "admittance matrix is numerically singular in lane {lane} at elimination step {step}"
            ),
            NetError::Ad(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for NetError {}

impl From<AdError> for NetError {
    fn from(e: AdError) -> Self {
        NetError::Ad(e)
    }
}

/// Squared pivot magnitude below which a lane counts as singular
/// (|pivot| < 1e-12).
const SINGULAR_PIVOT_ABS2: f64 = 1e-24;

#[derive(Debug, Clone)]
struct Fault {
    bus: usize,
    y: Phasor,
}

/// Dense bus admittance matrix with an optional single-bus fault overlay.
///
/// The base entries stay untouched by fault handling; the overlay admittance
/// is added to the faulted diagonal entry at solve time, so applying and
/// clearing a fault is idempotent and exactly restores the base matrix.
#[derive(Debug, Clone)]
pub struct AdmittanceMatrix {
    n_bus: usize,
    entries: Vec<Phasor>,
    fault: Option<Fault>,
}

impl AdmittanceMatrix {
    /// Row-major entries, `n_bus * n_bus` of them.
    pub fn new(n_bus: usize, entries: Vec<Phasor>) -> Result<AdmittanceMatrix, NetError> {
        if entries.len() != n_bus * n_bus {
            return Err(NetError::Dimension {
                expected: n_bus * n_bus,
                got: entries.len(),
            });
        }
        Ok(AdmittanceMatrix {
            n_bus,
            entries,
            fault: None,
        })
    }

    /// Convenience constructor from plain complex values (broadcast constants).
    pub fn from_values(
        tape: &Tape,
        n_bus: usize,
        values: &[(f64, f64)],
    ) -> Result<AdmittanceMatrix, NetError> {
        if values.len() != n_bus * n_bus {
            return Err(NetError::Dimension {
                expected: n_bus * n_bus,
                got: values.len(),
            });
        }
        let entries = values
            .iter()
            .map(|&(re, im)| Phasor::constant(tape, re, im))
            .collect();
        AdmittanceMatrix::new(n_bus, entries)
    }

    pub fn n_bus(&self) -> usize {
        self.n_bus
    }

    pub fn entry(&self, row: usize, col: usize) -> &Phasor {
        &self.entries[row * self.n_bus + col]
    }

    /// Overlay a shunt admittance on one bus diagonal. Replaces any previous
    /// overlay, so repeated application with the same arguments is idempotent.
    pub fn apply_fault(&mut self, bus: usize, y: Phasor) -> Result<(), NetError> {
        if bus >= self.n_bus {
            return Err(NetError::BusOutOfRange {
                bus,
                n_bus: self.n_bus,
            });
        }
        self.fault = Some(Fault { bus, y });
        Ok(())
    }

    pub fn clear_fault(&mut self) {
        self.fault = None;
    }

    pub fn fault_active(&self) -> bool {
        self.fault.is_some()
    }

    /// Effective entry seen by the solver (base plus overlay on the faulted
    /// diagonal). Records one addition when the overlay applies.
    fn effective_entry(&self, row: usize, col: usize) -> Phasor {
        let base = self.entry(row, col);
        match &self.fault {
            Some(f) if row == col && row == f.bus => base + &f.y,
            _ => base.clone(),
        }
    }

    /// Solve `Y V = I` for the bus voltages by Gaussian elimination with
    /// partial pivoting on squared magnitudes.
    ///
    /// Pivot selection uses the largest squared magnitude across finite
    /// lanes. A lane whose chosen pivot is below the singularity threshold
    /// aborts the solve; lanes that already carry non-finite values are left
    /// to propagate them instead.
    pub fn solve(&self, rhs: &[Phasor]) -> Result<Vec<Phasor>, NetError> {
        let n = self.n_bus;
        if rhs.len() != n {
            return Err(NetError::Dimension {
                expected: n,
                got: rhs.len(),
            });
        }
        let mut a: Vec<Phasor> = (0..n * n)
            .map(|k| self.effective_entry(k / n, k % n))
            .collect();
        let mut b: Vec<Phasor> = rhs.to_vec();

        for col in 0..n {
            // Pivot choice on detached values: max squared magnitude over
            // finite lanes, one choice shared by all lanes.
            let mut best_row = col;
            let mut best_metric = f64::NEG_INFINITY;
            for row in col..n {
                let p = &a[row * n + col];
                let re = p.re.values();
                let im = p.im.values();
                let metric = re
                    .iter()
                    .zip(&im)
                    .map(|(r, i)| r * r + i * i)
                    .filter(|m| m.is_finite())
                    .fold(f64::NEG_INFINITY, f64::max);
                if metric > best_metric {
                    best_metric = metric;
                    best_row = row;
                }
            }
            if best_row != col {
                for c in 0..n {
                    a.swap(col * n + c, best_row * n + c);
                }
                b.swap(col, best_row);
            }
            let pivot = a[col * n + col].clone();
            let p_re = pivot.re.values();
            let p_im = pivot.im.values();
            for (lane, (r, i)) in p_re.iter().zip(&p_im).enumerate() {
                let m = r * r + i * i;
                if m < SINGULAR_PIVOT_ABS2 {
                    return Err(NetError::Singular { lane, step: col });
                }
            }
            for row in col + 1..n {
                let factor = a[row * n + col].div(&pivot)?;
                for c in col + 1..n {
                    a[row * n + c] = &a[row * n + c] - &(&factor * &a[col * n + c]);
                }
                b[row] = &b[row] - &(&factor * &b[col]);
            }
        }

        let mut x: Vec<Option<Phasor>> = vec![None; n];
        for row in (0..n).rev() {
            let mut acc = b[row].clone();
            for c in row + 1..n {
                acc = &acc - &(&a[row * n + c] * x[c].as_ref().unwrap());
            }
            x[row] = Some(acc.div(&a[row * n + row])?);
        }
        Ok(x.into_iter().map(Option::unwrap).collect())
    }

    /// Detached infinity-norm residual of `Y V - I` per lane, overlay
    /// included. Diagnostic only; records nothing.
    pub fn residual_inf(&self, v: &[Phasor], rhs: &[Phasor]) -> Vec<f64> {
        let n = self.n_bus;
        let lanes = v[0].re.values().len();
        let mut worst = vec![0.0f64; lanes];
        for row in 0..n {
            let mut acc_re = vec![0.0f64; lanes];
            let mut acc_im = vec![0.0f64; lanes];
            for col in 0..n {
                let e = self.effective_entry(row, col);
                let (er, ei) = (e.re.values(), e.im.values());
                let (vr, vi) = (v[col].re.values(), v[col].im.values());
                for k in 0..lanes {
                    acc_re[k] += er[k] * vr[k] - ei[k] * vi[k];
                    acc_im[k] += er[k] * vi[k] + ei[k] * vr[k];
                }
            }
            let (br, bi) = (rhs[row].re.values(), rhs[row].im.values());
            for k in 0..lanes {
                let m = ((acc_re[k] - br[k]).powi(2) + (acc_im[k] - bi[k]).powi(2)).sqrt();
                if m > worst[k] {
                    worst[k] = m;
                }
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::backward;

    fn tape1() -> Tape {
        Tape::new(1).unwrap()
    }

    #[test]
    fn test_phasor_multiplication() {
        let t = tape1();
        let a = Phasor::constant(&t, 1.0, 0.0);
        let b = Phasor::constant(&t, 0.0, 1.0);
        let p = &a * &b;
        assert_eq!(p.value(0), (0.0, 1.0));

        let c = Phasor::constant(&t, 2.0, 3.0);
        let d = Phasor::constant(&t, 4.0, -5.0);
        let q = &c * &d;
        assert_eq!(q.value(0), (23.0, 2.0));
    }

    #[test]
    fn test_conjugate_product_is_real() {
        let t = tape1();
        let a = Phasor::constant(&t, 1.7, -2.3);
        let p = &a * &a.conj();
        assert!(p.im.value(0).abs() < 1e-15);
        assert!((p.re.value(0) - (1.7 * 1.7 + 2.3 * 2.3)).abs() < 1e-15);
    }

    #[test]
    fn test_division_by_self_is_unity() {
        let t = tape1();
        let a = Phasor::constant(&t, 1.0, 1.0);
        let q = a.div(&a).unwrap();
        assert!((q.re.value(0) - 1.0).abs() < 1e-15);
        assert!(q.im.value(0).abs() < 1e-15);
    }

    #[test]
    fn test_division_by_zero_reports_lane() {
        let t = Tape::new(2).unwrap();
        let a = Phasor::new(
            t.var(&[1.0, 1.0]).unwrap(),
            t.var(&[0.0, 0.0]).unwrap(),
        );
        let b = Phasor::new(
            t.var(&[1.0, 0.0]).unwrap(),
            t.var(&[0.0, 0.0]).unwrap(),
        );
        assert_eq!(a.div(&b).unwrap_err(), AdError::DivByZero { lane: 1 });
    }

    #[test]
    fn test_mul_j_rotates() {
        let t = tape1();
        let a = Phasor::constant(&t, 3.0, 4.0);
        assert_eq!(a.mul_j().value(0), (-4.0, 3.0));
    }

    #[test]
    fn test_solve_identity() {
        let t = tape1();
        let y = AdmittanceMatrix::from_values(&t, 2, &[(1.0, 0.0), (0.0, 0.0), (0.0, 0.0), (1.0, 0.0)])
            .unwrap();
        let rhs = vec![Phasor::constant(&t, 0.3, -0.7), Phasor::constant(&t, 1.1, 0.2)];
        let v = y.solve(&rhs).unwrap();
        assert_eq!(v[0].value(0), (0.3, -0.7));
        assert_eq!(v[1].value(0), (1.1, 0.2));
    }

    #[test]
    fn test_solve_diagonal() {
        let t = tape1();
        let y = AdmittanceMatrix::from_values(&t, 2, &[(2.0, 0.0), (0.0, 0.0), (0.0, 0.0), (4.0, 0.0)])
            .unwrap();
        let rhs = vec![Phasor::constant(&t, 2.0, 0.0), Phasor::constant(&t, 4.0, 0.0)];
        let v = y.solve(&rhs).unwrap();
        assert!((v[0].re.value(0) - 1.0).abs() < 1e-15);
        assert!((v[1].re.value(0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn test_solve_residual_well_conditioned_4x4() {
        let t = tape1();
        let n = 4;
        // Diagonally dominant complex matrix with deterministic off-diagonals.
        let mut vals = Vec::new();
        for r in 0..n {
            for c in 0..n {
                if r == c {
                    vals.push((6.0 + r as f64, -5.5));
                } else {
                    let s = (r * n + c) as f64;
                    vals.push(((0.13 * s).sin(), (0.29 * s).cos() * 0.8));
                }
            }
        }
        let y = AdmittanceMatrix::from_values(&t, n, &vals).unwrap();
        let rhs: Vec<Phasor> = (0..n)
            .map(|k| Phasor::constant(&t, 1.0 - 0.2 * k as f64, 0.4 * k as f64))
            .collect();
        let v = y.solve(&rhs).unwrap();
        let res = y.residual_inf(&v, &rhs);
        assert!(res[0] < 1e-10, "residual {res:?}");
    }

    #[test]
    fn test_singular_matrix_reports_lane_and_step() {
        let t = Tape::new(3).unwrap();
        // Second column is all zeros: singular at elimination step 1.
        let z = || Phasor::zero(&t);
        let one = || Phasor::constant(&t, 1.0, 0.0);
        let y = AdmittanceMatrix::new(2, vec![one(), z(), z(), z()]).unwrap();
        let rhs = vec![one(), one()];
        match y.solve(&rhs) {
            Err(NetError::Singular { lane: 0, step: 1 }) => {}
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn test_fault_overlay_apply_and_clear() {
        let t = tape1();
        let mut y =
            AdmittanceMatrix::from_values(&t, 2, &[(2.0, -1.0), (-1.0, 0.5), (-1.0, 0.5), (2.0, -1.0)])
                .unwrap();
        let rhs = vec![Phasor::constant(&t, 1.0, 0.0), Phasor::constant(&t, 0.0, 0.0)];
        let v_base = y.solve(&rhs).unwrap();

        y.apply_fault(0, Phasor::constant(&t, 1e5, -1e5)).unwrap();
        y.apply_fault(0, Phasor::constant(&t, 1e5, -1e5)).unwrap(); // idempotent
        let v_fault = y.solve(&rhs).unwrap();
        assert!(v_fault[0].abs2_value(0) < 1e-8, "faulted bus voltage should collapse");

        y.clear_fault();
        y.clear_fault();
        let v_clear = y.solve(&rhs).unwrap();
        assert_eq!(v_clear[0].value(0), v_base[0].value(0));
        assert_eq!(v_clear[1].value(0), v_base[1].value(0));
    }

    #[test]
    fn test_fault_bus_out_of_range() {
        let t = tape1();
        let mut y = AdmittanceMatrix::from_values(&t, 2, &[(1.0, 0.0); 4]).unwrap();
        assert_eq!(
            y.apply_fault(5, Phasor::zero(&t)).unwrap_err(),
            NetError::BusOutOfRange { bus: 5, n_bus: 2 }
        );
    }

    #[test]
    fn test_gradient_through_solve_matches_finite_difference() {
        // d|V0|^2 / d Re(Y01) on a 3-bus system, tape vs central difference.
        let base = 0.45;
        let eval = |y01_re: f64, want_grad: bool| -> (f64, f64) {
            let t = tape1();
            let y01 = t.var(&[y01_re]).unwrap();
            let mk = |re: f64, im: f64| Phasor::constant(&t, re, im);
            let entries = vec![
                mk(5.0, -2.0),
                Phasor::new(y01.clone(), t.constant(0.3)),
                mk(-0.5, 0.1),
                Phasor::new(y01.clone(), t.constant(0.3)),
                mk(4.0, -1.5),
                mk(-0.7, 0.2),
                mk(-0.5, 0.1),
                mk(-0.7, 0.2),
                mk(3.5, -1.0),
            ];
            let y = AdmittanceMatrix::new(3, entries).unwrap();
            let rhs = vec![mk(1.0, 0.2), mk(-0.3, 0.5), mk(0.1, -0.4)];
            let v = y.solve(&rhs).unwrap();
            let loss = v[0].abs2();
            let g = if want_grad {
                backward(&loss).grad(&y01)[0]
            } else {
                0.0
            };
            (loss.value(0), g)
        };
        let (_, grad) = eval(base, true);
        let h = 1e-6;
        let (lp, _) = eval(base + h, false);
        let (lm, _) = eval(base - h, false);
        let fd = (lp - lm) / (2.0 * h);
        let rel = (grad - fd).abs() / fd.abs().max(1e-12);
        assert!(rel < 1e-5, "grad {grad} vs fd {fd} (rel {rel})");
    }
}
