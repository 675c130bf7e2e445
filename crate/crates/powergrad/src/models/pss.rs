//! STAB1 power system stabilizer.
//!
//! Speed deviation in, damping signal out:
//!
//! ```text
//! washout s T_w / (1 + s T_w)
//!   -> lead-lag (1 + s T_1) / (1 + s T_2)
//!   -> lead-lag (1 + s T_3) / (1 + s T_4)
//!   -> gain K
//!   -> clamp to [-H_lim, +H_lim]
//! ```
//!
//! Three states in fixed order: washout internal `x_w` and the two lead-lag
//! internals `x_1`, `x_2`. Realizations: washout `x_w' = (u - x_w)/T_w`,
//! `y = u - x_w`; lead-lag `x' = (u - x)/T_den`,
//! `y = (T_num/T_den) u + (1 - T_num/T_den) x`.
//!
//! `H_lim` is applied through bound nodes, so the limit itself can be an
//! optimization variable.

use crate::models::ModelError;
use crate::tape::{ADScalar, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct Stab1Params {
    /// Stabilizer gain.
    pub k: f64,
    /// Washout time constant, s.
    pub t_w: f64,
    pub t_1: f64,
    pub t_2: f64,
    pub t_3: f64,
    pub t_4: f64,
    /// Symmetric output limit, pu.
    pub h_lim: f64,
}

impl Default for Stab1Params {
    fn default() -> Self {
        Stab1Params {
            k: 40.0,
            t_w: 11.0,
            t_1: 0.08,
            t_2: 0.50,
            t_3: 0.10,
            t_4: 0.05,
            h_lim: 0.03,
        }
    }
}

impl Stab1Params {
    pub fn validate(&self, name: &str) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::new(format!("pss {name}"), msg));
        for (label, v) in [
            ("T_w", self.t_w),
            ("T_1", self.t_1),
            ("T_2", self.t_2),
            ("T_3", self.t_3),
            ("T_4", self.t_4),
        ] {
            if !(v > 0.0) {
                return err(format!("time constant {label} must be positive, got {v}"));
            }
        }
        if !(self.h_lim > 0.0) {
            return err(format!("H_lim must be positive, got {}", self.h_lim));
        }
        if !self.k.is_finite() {
            return err(format!("gain K must be finite, got {}", self.k));
        }
        Ok(())
    }

    pub const PARAM_NAMES: [&'static str; 7] = ["K", "T_w", "T_1", "T_2", "T_3", "T_4", "H_lim"];

    pub fn value_of(&self, field: &str) -> Option<f64> {
        Some(match field {
            "K" => self.k,
            "T_w" => self.t_w,
            "T_1" => self.t_1,
            "T_2" => self.t_2,
            "T_3" => self.t_3,
            "T_4" => self.t_4,
            "H_lim" => self.h_lim,
            _ => return None,
        })
    }

    /// Analytic gain magnitude at angular frequency `w`, ignoring the limit.
    pub fn gain_magnitude(&self, w: f64) -> f64 {
        let wash = w * self.t_w / (1.0 + (w * self.t_w).powi(2)).sqrt();
        let ll = |num: f64, den: f64| {
            ((1.0 + (w * num).powi(2)) / (1.0 + (w * den).powi(2))).sqrt()
        };
        self.k.abs() * wash * ll(self.t_1, self.t_2) * ll(self.t_3, self.t_4)
    }
}

#[derive(Debug, Clone)]
pub struct Stab1ParamsAd {
    pub k: ADScalar,
    pub t_w: ADScalar,
    pub t_1: ADScalar,
    pub t_2: ADScalar,
    pub t_3: ADScalar,
    pub t_4: ADScalar,
    pub h_lim: ADScalar,
}

impl Stab1ParamsAd {
    pub fn bind(
        tape: &Tape,
        p: &Stab1Params,
        mut lookup: impl FnMut(&str) -> Option<ADScalar>,
    ) -> Stab1ParamsAd {
        let mut get = |field: &str, v: f64| lookup(field).unwrap_or_else(|| tape.constant(v));
        Stab1ParamsAd {
            k: get("K", p.k),
            t_w: get("T_w", p.t_w),
            t_1: get("T_1", p.t_1),
            t_2: get("T_2", p.t_2),
            t_3: get("T_3", p.t_3),
            t_4: get("T_4", p.t_4),
            h_lim: get("H_lim", p.h_lim),
        }
    }

    pub fn bind_const(tape: &Tape, p: &Stab1Params) -> Stab1ParamsAd {
        Stab1ParamsAd::bind(tape, p, |_| None)
    }
}

/// PSS state in the fixed order `[x_w, x_1, x_2]`.
#[derive(Debug, Clone)]
pub struct Stab1State {
    pub x_w: ADScalar,
    pub x_1: ADScalar,
    pub x_2: ADScalar,
}

impl Stab1State {
    pub const STATE_NAMES: [&'static str; 3] = ["x_w", "x_1", "x_2"];

    pub fn euler(&self, dx: &Stab1State, dt: f64) -> Stab1State {
        Stab1State {
            x_w: &self.x_w + &(&dx.x_w * dt),
            x_1: &self.x_1 + &(&dx.x_1 * dt),
            x_2: &self.x_2 + &(&dx.x_2 * dt),
        }
    }

    pub fn max_abs_value(&self) -> f64 {
        [&self.x_w, &self.x_1, &self.x_2]
            .iter()
            .flat_map(|s| s.values())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

fn lead_lag(
    num: &ADScalar,
    den: &ADScalar,
    u: &ADScalar,
    x: &ADScalar,
) -> (ADScalar, ADScalar) {
    let dx = &(u - x) / den;
    let ratio = num / den;
    let y = &(&ratio * u) + &(&(-&(&ratio - 1.0)) * x);
    (dx, y)
}

/// State derivatives plus the limited stabilizer output.
pub fn stab1_derivatives(
    p: &Stab1ParamsAd,
    s: &Stab1State,
    d_omega: &ADScalar,
) -> (Stab1State, ADScalar) {
    let dx_w = &(d_omega - &s.x_w) / &p.t_w;
    let y_w = d_omega - &s.x_w;
    let (dx_1, y_1) = lead_lag(&p.t_1, &p.t_2, &y_w, &s.x_1);
    let (dx_2, y_2) = lead_lag(&p.t_3, &p.t_4, &y_1, &s.x_2);
    let raw = &p.k * &y_2;
    let v_pss = raw.clamp_nodes(&(-&p.h_lim), &p.h_lim);
    (
        Stab1State {
            x_w: dx_w,
            x_1: dx_1,
            x_2: dx_2,
        },
        v_pss,
    )
}

/// Rest state for a constant input: the washout absorbs the level, both
/// lead-lags sit at zero, output zero.
pub fn stab1_init(d_omega0: &ADScalar, tape: &Tape) -> Stab1State {
    Stab1State {
        x_w: d_omega0.clone(),
        x_1: tape.constant(0.0),
        x_2: tape.constant(0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::backward;

    fn fast() -> Stab1Params {
        // Short washout so tests settle quickly; limit wide open.
        Stab1Params {
            t_w: 0.5,
            h_lim: 1e3,
            ..Stab1Params::default()
        }
    }

    #[test]
    fn test_param_validation() {
        assert!(Stab1Params::default().validate("PSS").is_ok());
        let mut bad = Stab1Params::default();
        bad.t_2 = -0.1;
        assert!(bad.validate("PSS").is_err());
        let mut bad = Stab1Params::default();
        bad.h_lim = 0.0;
        assert!(bad.validate("PSS").is_err());
    }

    #[test]
    fn test_zero_input_zero_state_is_quiescent() {
        let tape = Tape::new(1).unwrap();
        let p = Stab1ParamsAd::bind_const(&tape, &Stab1Params::default());
        let zero = tape.constant(0.0);
        let s = stab1_init(&zero, &tape);
        let (dx, v) = stab1_derivatives(&p, &s, &zero);
        assert_eq!(dx.max_abs_value(), 0.0);
        assert_eq!(v.value(0), 0.0);
    }

    #[test]
    fn test_washout_blocks_constant_input() {
        let tape = Tape::new(1).unwrap();
        let p = Stab1ParamsAd::bind_const(&tape, &fast());
        let u = tape.constant(0.01);
        let mut s = Stab1State {
            x_w: tape.constant(0.0),
            x_1: tape.constant(0.0),
            x_2: tape.constant(0.0),
        };
        let dt = 1e-3;
        let mut v_last = f64::INFINITY;
        for _ in 0..8000 {
            let (dx, v) = stab1_derivatives(&p, &s, &u);
            v_last = v.value(0);
            s = s.euler(&dx, dt);
        }
        // 8 s is 16 washout time constants; the DC response must be gone.
        assert!(v_last.abs() < 1e-6, "residual output {v_last}");
        // And the rest state it found is the analytic one.
        assert!((s.x_w.value(0) - 0.01).abs() < 1e-6);
    }

    #[test]
    fn test_sinusoid_amplitude_matches_analytic_gain() {
        let params = fast();
        let tape = Tape::new(1).unwrap();
        let p = Stab1ParamsAd::bind_const(&tape, &params);
        let mut s = Stab1State {
            x_w: tape.constant(0.0),
            x_1: tape.constant(0.0),
            x_2: tape.constant(0.0),
        };
        let dt = 2e-4;
        let amp_in = 0.01;
        let w = 2.0 * std::f64::consts::PI; // 1 Hz
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let steps = (8.0 / dt) as usize;
        let tail = (1.0 / dt) as usize;
        for k in 0..steps {
            let t = k as f64 * dt;
            let u = tape.constant(amp_in * (w * t).sin());
            let (dx, v) = stab1_derivatives(&p, &s, &u);
            if k >= steps - tail {
                lo = lo.min(v.value(0));
                hi = hi.max(v.value(0));
            }
            s = s.euler(&dx, dt);
        }
        let measured = (hi - lo) / 2.0;
        let expected = params.gain_magnitude(w) * amp_in;
        assert!(
            (measured - expected).abs() / expected < 0.01,
            "|G(j 2pi)|: measured {measured}, analytic {expected}"
        );
    }

    #[test]
    fn test_output_clamps_at_h_lim_with_limit_gradient() {
        let tape = Tape::new(1).unwrap();
        let params = Stab1Params::default(); // h_lim = 0.03
        let h_lim = tape.var(&[params.h_lim]).unwrap();
        let p = Stab1ParamsAd::bind(&tape, &params, |f| {
            (f == "H_lim").then(|| h_lim.clone())
        });
        // A step input passes straight through the washout at t = 0+ and is
        // amplified far beyond the limit.
        let u = tape.constant(0.5);
        let s = Stab1State {
            x_w: tape.constant(0.0),
            x_1: tape.constant(0.0),
            x_2: tape.constant(0.0),
        };
        let (_, v) = stab1_derivatives(&p, &s, &u);
        assert_eq!(v.value(0), 0.03);
        let g = backward(&v);
        assert_eq!(g.grad(&h_lim)[0], 1.0);

        let u_neg = tape.constant(-0.5);
        let (_, v_neg) = stab1_derivatives(&p, &s, &u_neg);
        assert_eq!(v_neg.value(0), -0.03);
        let g_neg = backward(&v_neg);
        assert_eq!(g_neg.grad(&h_lim)[0], -1.0);
    }

    #[test]
    fn test_gain_and_washout_gradients_match_finite_difference() {
        // Drive the chain with a prescribed sinusoid for 50 Euler steps and
        // differentiate the final output with respect to K and T_w.
        let run = |k: f64, t_w: f64, grad: bool| -> (f64, f64, f64) {
            let params = Stab1Params {
                h_lim: 1e3,
                ..Stab1Params::default()
            };
            let tape = Tape::new(1).unwrap();
            let kv = tape.var(&[k]).unwrap();
            let twv = tape.var(&[t_w]).unwrap();
            let p = Stab1ParamsAd::bind(&tape, &params, |f| match f {
                "K" => Some(kv.clone()),
                "T_w" => Some(twv.clone()),
                _ => None,
            });
            let mut s = Stab1State {
                x_w: tape.constant(0.0),
                x_1: tape.constant(0.0),
                x_2: tape.constant(0.0),
            };
            let dt = 5e-3;
            let mut out = tape.constant(0.0);
            for i in 0..50 {
                let u = tape.constant(0.01 * (8.0 * i as f64 * dt).sin());
                let (dx, v) = stab1_derivatives(&p, &s, &u);
                s = s.euler(&dx, dt);
                out = v;
            }
            if grad {
                let g = backward(&out);
                (out.value(0), g.grad(&kv)[0], g.grad(&twv)[0])
            } else {
                (out.value(0), 0.0, 0.0)
            }
        };
        let (k0, t0) = (40.0, 11.0);
        let (_, gk, gt) = run(k0, t0, true);
        let h = 1e-5;
        let fd_k = (run(k0 + h, t0, false).0 - run(k0 - h, t0, false).0) / (2.0 * h);
        let fd_t = (run(k0, t0 + h, false).0 - run(k0, t0 - h, false).0) / (2.0 * h);
        assert!((gk - fd_k).abs() / fd_k.abs().max(1e-12) < 1e-6, "{gk} vs {fd_k}");
        assert!((gt - fd_t).abs() / fd_t.abs().max(1e-12) < 1e-5, "{gt} vs {fd_t}");
    }
}
