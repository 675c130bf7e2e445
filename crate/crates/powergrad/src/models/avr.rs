//! SEXS automatic voltage regulator.
//!
//! Transfer function `K (1 + s T_a) / (1 + s T_b) * 1 / (1 + s T_e)` acting
//! on the error `V_ref - v_meas + v_pss`, with the exciter output clamped to
//! `[E_min, E_max]`. Two states: the lead-lag internal `x_ll` and the exciter
//! output state `e_f`. The clamp sits on the output only; the state itself
//! is free (windup limiter).
//!
//! Lead-lag realization: `x_ll' = (u - x_ll)/T_b`,
//! `y = (T_a/T_b) u + (1 - T_a/T_b) x_ll`.

use crate::models::ModelError;
use crate::tape::{ADScalar, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct SexsParams {
    /// Regulator gain.
    pub k: f64,
    /// Lead time constant, s.
    pub t_a: f64,
    /// Lag time constant, s.
    pub t_b: f64,
    /// Exciter time constant, s.
    pub t_e: f64,
    /// Output floor, pu.
    pub e_min: f64,
    /// Output ceiling, pu.
    pub e_max: f64,
    /// Voltage setpoint, pu; `None` derives the value that holds the
    /// steady-state field voltage.
    pub v_ref: Option<f64>,
}

impl Default for SexsParams {
    fn default() -> Self {
        SexsParams {
            k: 100.0,
            t_a: 1.0,
            t_b: 10.0,
            t_e: 0.05,
            e_min: -5.0,
            e_max: 5.0,
            v_ref: None,
        }
    }
}

impl SexsParams {
    pub fn validate(&self, name: &str) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::new(format!("avr {name}"), msg));
        for (label, v) in [("T_a", self.t_a), ("T_b", self.t_b), ("T_e", self.t_e)] {
            if !(v > 0.0) {
                return err(format!("time constant {label} must be positive, got {v}"));
            }
        }
        if !(self.e_min < self.e_max) {
            return err(format!(
                "limits must satisfy E_min < E_max, got {} / {}",
                self.e_min, self.e_max
            ));
        }
        if !self.k.is_finite() || self.k == 0.0 {
            return err(format!("gain K must be finite and nonzero, got {}", self.k));
        }
        Ok(())
    }

    pub const PARAM_NAMES: [&'static str; 4] = ["K", "T_a", "T_b", "T_e"];

    pub fn value_of(&self, field: &str) -> Option<f64> {
        Some(match field {
            "K" => self.k,
            "T_a" => self.t_a,
            "T_b" => self.t_b,
            "T_e" => self.t_e,
            _ => return None,
        })
    }
}

/// AVR parameters bound to a tape. `v_ref` starts as the configured value
/// (NaN constant when unset) and is replaced by the steady-state initializer.
#[derive(Debug, Clone)]
pub struct SexsParamsAd {
    pub k: ADScalar,
    pub t_a: ADScalar,
    pub t_b: ADScalar,
    pub t_e: ADScalar,
    pub e_min: f64,
    pub e_max: f64,
    pub v_ref: ADScalar,
}

impl SexsParamsAd {
    pub fn bind(
        tape: &Tape,
        p: &SexsParams,
        mut lookup: impl FnMut(&str) -> Option<ADScalar>,
    ) -> SexsParamsAd {
        let mut get = |field: &str, v: f64| lookup(field).unwrap_or_else(|| tape.constant(v));
        SexsParamsAd {
            k: get("K", p.k),
            t_a: get("T_a", p.t_a),
            t_b: get("T_b", p.t_b),
            t_e: get("T_e", p.t_e),
            e_min: p.e_min,
            e_max: p.e_max,
            v_ref: tape.constant(p.v_ref.unwrap_or(f64::NAN)),
        }
    }

    pub fn bind_const(tape: &Tape, p: &SexsParams) -> SexsParamsAd {
        SexsParamsAd::bind(tape, p, |_| None)
    }
}

/// AVR state: lead-lag internal and exciter output state, in that order.
#[derive(Debug, Clone)]
pub struct SexsState {
    pub x_ll: ADScalar,
    pub e_f: ADScalar,
}

impl SexsState {
    pub const STATE_NAMES: [&'static str; 2] = ["x_ll", "e_f"];

    pub fn euler(&self, dx: &SexsState, dt: f64) -> SexsState {
        SexsState {
            x_ll: &self.x_ll + &(&dx.x_ll * dt),
            e_f: &self.e_f + &(&dx.e_f * dt),
        }
    }

    pub fn max_abs_value(&self) -> f64 {
        [&self.x_ll, &self.e_f]
            .iter()
            .flat_map(|s| s.values())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Clamped exciter output seen by the machine.
pub fn sexs_output(p: &SexsParamsAd, s: &SexsState) -> ADScalar {
    s.e_f.clamp(p.e_min, p.e_max)
}

/// State derivatives plus the clamped field voltage.
pub fn sexs_derivatives(
    p: &SexsParamsAd,
    s: &SexsState,
    v_meas: &ADScalar,
    v_pss: &ADScalar,
) -> (SexsState, ADScalar) {
    let u = &(&p.v_ref - v_meas) + v_pss;
    let ratio = &p.t_a / &p.t_b;
    let y_ll = &(&ratio * &u) + &(&(-&(&ratio - 1.0)) * &s.x_ll);
    let dx = SexsState {
        x_ll: &(&u - &s.x_ll) / &p.t_b,
        e_f: &(&(&p.k * &y_ll) - &s.e_f) / &p.t_e,
    };
    (dx, sexs_output(p, s))
}

/// Back-solve the AVR rest state for a required field voltage, returning the
/// state and the `v_ref` that holds it (to be stored into the params).
///
/// Zero derivatives force `x_ll = u = e_f0 / K` and `e_f = e_f0`; the error
/// definition then gives `v_ref = v_meas0 + e_f0 / K`.
pub fn sexs_init(
    p: &SexsParamsAd,
    e_f0: &ADScalar,
    v_meas0: &ADScalar,
) -> (SexsState, ADScalar) {
    let u0 = e_f0 / &p.k;
    let state = SexsState {
        x_ll: u0.clone(),
        e_f: e_f0.clone(),
    };
    (state, v_meas0 + &u0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::backward;

    #[test]
    fn test_param_validation() {
        assert!(SexsParams::default().validate("AVR").is_ok());
        let mut bad = SexsParams::default();
        bad.t_e = 0.0;
        assert!(bad.validate("AVR").is_err());
        let mut bad = SexsParams::default();
        bad.e_min = 5.0;
        assert!(bad.validate("AVR").is_err());
        let mut bad = SexsParams::default();
        bad.k = 0.0;
        assert!(bad.validate("AVR").is_err());
    }

    #[test]
    fn test_zero_states_at_setpoint_have_zero_derivatives() {
        let tape = Tape::new(1).unwrap();
        let mut p = SexsParamsAd::bind_const(&tape, &SexsParams::default());
        p.v_ref = tape.constant(1.0);
        let s = SexsState {
            x_ll: tape.constant(0.0),
            e_f: tape.constant(0.0),
        };
        let v_meas = tape.constant(1.0);
        let v_pss = tape.constant(0.0);
        let (dx, e_f) = sexs_derivatives(&p, &s, &v_meas, &v_pss);
        assert!(dx.max_abs_value() < 1e-15);
        assert_eq!(e_f.value(0), 0.0);
    }

    #[test]
    fn test_init_is_a_fixed_point_with_expected_output() {
        let tape = Tape::new(1).unwrap();
        let mut p = SexsParamsAd::bind_const(&tape, &SexsParams::default());
        let e_f0 = tape.constant(1.8);
        let v_meas = tape.constant(0.97);
        let (s, v_ref) = sexs_init(&p, &e_f0, &v_meas);
        p.v_ref = v_ref;
        let (dx, e_f) = sexs_derivatives(&p, &s, &v_meas, &tape.constant(0.0));
        assert!(dx.max_abs_value() < 1e-13, "residual {}", dx.max_abs_value());
        assert!((e_f.value(0) - 1.8).abs() < 1e-15);
    }

    #[test]
    fn test_step_response_is_monotone_when_ta_equals_tb() {
        // T_a = T_b cancels the lead-lag, leaving a pure first-order rise.
        let params = SexsParams {
            t_a: 2.0,
            t_b: 2.0,
            e_max: 500.0,
            e_min: -500.0,
            ..SexsParams::default()
        };
        let tape = Tape::new(1).unwrap();
        let mut p = SexsParamsAd::bind_const(&tape, &params);
        p.v_ref = tape.constant(1.05);
        let v_meas = tape.constant(1.0);
        let v_pss = tape.constant(0.0);
        let mut s = SexsState {
            x_ll: tape.constant(0.05),
            e_f: tape.constant(0.0),
        };
        let dt = 1e-3;
        let mut last = 0.0;
        for _ in 0..2000 {
            let (dx, e_f) = sexs_derivatives(&p, &s, &v_meas, &v_pss);
            assert!(e_f.value(0) >= last - 1e-12, "output must not dip");
            last = e_f.value(0);
            s = s.euler(&dx, dt);
        }
        // Final value heads to K * error = 100 * 0.05 = 5.
        assert!(last > 4.9 && last <= 5.0 + 1e-9, "got {last}");
    }

    #[test]
    fn test_output_respects_limits_for_wild_states() {
        let tape = Tape::new(1).unwrap();
        let p = SexsParamsAd::bind_const(&tape, &SexsParams::default());
        for e in [-1e6, -5.1, -0.3, 0.0, 2.2, 5.0001, 7e9] {
            let s = SexsState {
                x_ll: tape.constant(0.0),
                e_f: tape.constant(e),
            };
            let out = sexs_output(&p, &s).value(0);
            assert!((-5.0..=5.0).contains(&out), "output {out} for state {e}");
        }
    }

    #[test]
    fn test_saturated_output_has_zero_state_gradient() {
        let tape = Tape::new(1).unwrap();
        let p = SexsParamsAd::bind_const(&tape, &SexsParams::default());
        let e_f_free = tape.var(&[2.0]).unwrap();
        let e_f_sat = tape.var(&[6.5]).unwrap();
        let out_free = sexs_output(
            &p,
            &SexsState {
                x_ll: tape.constant(0.0),
                e_f: e_f_free.clone(),
            },
        );
        let out_sat = sexs_output(
            &p,
            &SexsState {
                x_ll: tape.constant(0.0),
                e_f: e_f_sat.clone(),
            },
        );
        let g_free = backward(&out_free);
        let g_sat = backward(&out_sat);
        assert_eq!(g_free.grad(&e_f_free)[0], 1.0);
        assert_eq!(g_sat.grad(&e_f_sat)[0], 0.0);
        assert_eq!(out_sat.value(0), 5.0);
    }

    #[test]
    fn test_gain_gradient_matches_finite_difference() {
        // Three Euler steps from rest after a setpoint step; d e_f / d K.
        let run = |k: f64, grad: bool| -> (f64, f64) {
            let tape = Tape::new(1).unwrap();
            let kv = tape.var(&[k]).unwrap();
            let mut p = SexsParamsAd::bind(&tape, &SexsParams::default(), |f| {
                (f == "K").then(|| kv.clone())
            });
            p.v_ref = tape.constant(1.02);
            let v_meas = tape.constant(1.0);
            let v_pss = tape.constant(0.0);
            let mut s = SexsState {
                x_ll: tape.constant(0.0),
                e_f: tape.constant(0.0),
            };
            let mut out = tape.constant(0.0);
            for _ in 0..3 {
                let (dx, e_f) = sexs_derivatives(&p, &s, &v_meas, &v_pss);
                s = s.euler(&dx, 0.01);
                out = e_f;
            }
            let g = if grad { backward(&out).grad(&kv)[0] } else { 0.0 };
            (out.value(0), g)
        };
        let (_, g) = run(100.0, true);
        let h = 1e-4;
        let fd = (run(100.0 + h, false).0 - run(100.0 - h, false).0) / (2.0 * h);
        assert!((g - fd).abs() / fd.abs().max(1e-12) < 1e-7, "{g} vs {fd}");
    }
}
