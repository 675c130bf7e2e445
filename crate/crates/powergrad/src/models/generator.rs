//! Sixth-order synchronous machine with an algebraic stator.
//!
//! State order is fixed: rotor speed deviation, rotor angle, transient and
//! subtransient voltages on both axes. The stator itself is an algebraic
//! constraint: with stator resistance neglected,
//!
//! ```text
//! v_d = e_d'' + x_q'' i_q        v_q = e_q'' - x_d'' i_d
//! ```
//!
//! which the network sees as a Norton equivalent: a constant admittance
//! 1/(j x_d'') folded into the bus matrix plus a state-dependent current
//! source. When x_d'' != x_q'' the single complex admittance cannot capture
//! the stator exactly; the leftover is a correction source proportional to
//! the d-axis terminal voltage, which the simulator feeds from the previous
//! step (exact in steady state, first-order in dt during transients, zero
//! whenever the subtransient reactances are equal).
//!
//! The dq <-> network transformation used throughout is
//! `F_net = (f_d + j f_q) * u` with `u = e^{j(delta - pi/2)} = sin(delta) - j cos(delta)`.

use crate::models::ModelError;
use crate::phasor::Phasor;
use crate::tape::{sin_cos, ADScalar, Tape};

/// Machine parameters, per-unit on the machine base `s_n` (times in seconds).
#[derive(Debug, Clone, PartialEq)]
pub struct GenParams {
    /// Inertia constant H.
    pub h: f64,
    /// Damping coefficient D.
    pub d: f64,
    pub x_d: f64,
    pub x_q: f64,
    pub x_d_t: f64,
    pub x_q_t: f64,
    pub x_d_st: f64,
    pub x_q_st: f64,
    pub t_d0_t: f64,
    pub t_q0_t: f64,
    pub t_d0_st: f64,
    pub t_q0_st: f64,
    /// Machine MVA rating.
    pub s_n: f64,
    /// Mechanical torque; `None` derives it from the steady-state solution.
    pub t_m: Option<f64>,
}

impl GenParams {
    pub fn validate(&self, name: &str) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::new(format!("generator {name}"), msg));
        for (label, v) in [
            ("T_d0_t", self.t_d0_t),
            ("T_q0_t", self.t_q0_t),
            ("T_d0_st", self.t_d0_st),
            ("T_q0_st", self.t_q0_st),
        ] {
            if !(v > 0.0) {
                return err(format!("time constant {label} must be positive, got {v}"));
            }
        }
        if !(self.h > 0.0) {
            return err(format!("H must be positive, got {}", self.h));
        }
        if !(self.s_n > 0.0) {
            return err(format!("S_n must be positive, got {}", self.s_n));
        }
        if !(self.x_d >= self.x_d_t && self.x_d_t >= self.x_d_st && self.x_d_st > 0.0) {
            return err(format!(
                "d-axis reactances must satisfy X_d >= X_d_t >= X_d_st > 0, got {} / {} / {}",
                self.x_d, self.x_d_t, self.x_d_st
            ));
        }
        if !(self.x_q >= self.x_q_t && self.x_q_t >= self.x_q_st && self.x_q_st > 0.0) {
            return err(format!(
                "q-axis reactances must satisfy X_q >= X_q_t >= X_q_st > 0, got {} / {} / {}",
                self.x_q, self.x_q_t, self.x_q_st
            ));
        }
        if !self.d.is_finite() {
            return err(format!("D must be finite, got {}", self.d));
        }
        Ok(())
    }

    /// Names accepted when binding an optimizable parameter to this machine.
    pub const PARAM_NAMES: [&'static str; 12] = [
        "H", "D", "X_d", "X_q", "X_d_t", "X_q_t", "X_d_st", "X_q_st", "T_d0_t", "T_q0_t",
        "T_d0_st", "T_q0_st",
    ];

    pub fn value_of(&self, field: &str) -> Option<f64> {
        Some(match field {
            "H" => self.h,
            "D" => self.d,
            "X_d" => self.x_d,
            "X_q" => self.x_q,
            "X_d_t" => self.x_d_t,
            "X_q_t" => self.x_q_t,
            "X_d_st" => self.x_d_st,
            "X_q_st" => self.x_q_st,
            "T_d0_t" => self.t_d0_t,
            "T_q0_t" => self.t_q0_t,
            "T_d0_st" => self.t_d0_st,
            "T_q0_st" => self.t_q0_st,
            _ => return None,
        })
    }
}

/// Machine parameters bound to a tape, so any of them can be an optimization
/// variable while the rest are constants.
#[derive(Debug, Clone)]
pub struct GenParamsAd {
    pub h: ADScalar,
    pub d: ADScalar,
    pub x_d: ADScalar,
    pub x_q: ADScalar,
    pub x_d_t: ADScalar,
    pub x_q_t: ADScalar,
    pub x_d_st: ADScalar,
    pub x_q_st: ADScalar,
    pub t_d0_t: ADScalar,
    pub t_q0_t: ADScalar,
    pub t_d0_st: ADScalar,
    pub t_q0_st: ADScalar,
}

impl GenParamsAd {
    /// Bind every field, taking an override node where provided and a tape
    /// constant otherwise.
    pub fn bind(
        tape: &Tape,
        p: &GenParams,
        mut lookup: impl FnMut(&str) -> Option<ADScalar>,
    ) -> GenParamsAd {
        let mut get = |field: &str, v: f64| lookup(field).unwrap_or_else(|| tape.constant(v));
        GenParamsAd {
            h: get("H", p.h),
            d: get("D", p.d),
            x_d: get("X_d", p.x_d),
            x_q: get("X_q", p.x_q),
            x_d_t: get("X_d_t", p.x_d_t),
            x_q_t: get("X_q_t", p.x_q_t),
            x_d_st: get("X_d_st", p.x_d_st),
            x_q_st: get("X_q_st", p.x_q_st),
            t_d0_t: get("T_d0_t", p.t_d0_t),
            t_q0_t: get("T_q0_t", p.t_q0_t),
            t_d0_st: get("T_d0_st", p.t_d0_st),
            t_q0_st: get("T_q0_st", p.t_q0_st),
        }
    }

    pub fn bind_const(tape: &Tape, p: &GenParams) -> GenParamsAd {
        GenParamsAd::bind(tape, p, |_| None)
    }
}

/// Machine state in the fixed order
/// `[delta_omega, delta, e_q_t, e_d_t, e_q_st, e_d_st]`.
#[derive(Debug, Clone)]
pub struct GenState {
    /// Rotor speed deviation, pu.
    pub delta_omega: ADScalar,
    /// Rotor angle, rad.
    pub delta: ADScalar,
    pub e_q_t: ADScalar,
    pub e_d_t: ADScalar,
    pub e_q_st: ADScalar,
    pub e_d_st: ADScalar,
}

impl GenState {
    pub const STATE_NAMES: [&'static str; 6] =
        ["delta_omega", "delta", "e_q_t", "e_d_t", "e_q_st", "e_d_st"];

    pub fn as_array(&self) -> [&ADScalar; 6] {
        [
            &self.delta_omega,
            &self.delta,
            &self.e_q_t,
            &self.e_d_t,
            &self.e_q_st,
            &self.e_d_st,
        ]
    }

    /// Forward Euler update `x + dx * dt`.
    pub fn euler(&self, dx: &GenState, dt: f64) -> GenState {
        GenState {
            delta_omega: &self.delta_omega + &(&dx.delta_omega * dt),
            delta: &self.delta + &(&dx.delta * dt),
            e_q_t: &self.e_q_t + &(&dx.e_q_t * dt),
            e_d_t: &self.e_d_t + &(&dx.e_d_t * dt),
            e_q_st: &self.e_q_st + &(&dx.e_q_st * dt),
            e_d_st: &self.e_d_st + &(&dx.e_d_st * dt),
        }
    }

    /// Largest absolute derivative value across states and lanes; used for
    /// steady-state residual checks.
    pub fn max_abs_value(&self) -> f64 {
        self.as_array()
            .iter()
            .flat_map(|s| s.values())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Unit phasor `u = e^{j(delta - pi/2)}` mapping rotor dq onto the network frame.
pub fn rotor_unit_phasor(delta: &ADScalar) -> Phasor {
    let (s, c) = sin_cos(delta);
    Phasor::new(s, -c)
}

/// Network-frame phasor to dq components: `(d, q)` parts of `f * conj(u)`.
pub fn to_dq(f: &Phasor, u: &Phasor) -> (ADScalar, ADScalar) {
    let p = f * &u.conj();
    (p.re, p.im)
}

/// dq components back to the network frame: `(d + j q) * u`.
pub fn from_dq(d: &ADScalar, q: &ADScalar, u: &Phasor) -> Phasor {
    &Phasor::new(d.clone(), q.clone()) * u
}

/// Air-gap electrical torque
/// `T_e = e_d'' i_d + e_q'' i_q + (x_q'' - x_d'') i_d i_q`.
pub fn gen_torque(p: &GenParamsAd, s: &GenState, i_d: &ADScalar, i_q: &ADScalar) -> ADScalar {
    let main = &(&s.e_d_st * i_d) + &(&s.e_q_st * i_q);
    &main + &(&(&(&p.x_q_st - &p.x_d_st) * i_d) * i_q)
}

/// Time derivatives of the machine states.
///
/// `i_d`, `i_q` are the machine-base stator currents, `e_f` the field
/// voltage, `t_m` the mechanical torque, and `omega_base` the synchronous
/// speed in rad/s that converts the pu speed deviation into an angle rate.
pub fn gen_derivatives(
    p: &GenParamsAd,
    s: &GenState,
    i_d: &ADScalar,
    i_q: &ADScalar,
    e_f: &ADScalar,
    t_m: &ADScalar,
    omega_base: f64,
) -> GenState {
    let te = gen_torque(p, s, i_d, i_q);
    let accel = &(&(t_m - &te) / &(2.0 * &p.h)) - &(&p.d * &s.delta_omega);
    GenState {
        delta_omega: accel,
        delta: &s.delta_omega * omega_base,
        e_q_t: &(&(e_f - &s.e_q_t) - &(&(&p.x_d - &p.x_d_t) * i_d)) / &p.t_d0_t,
        e_d_t: &(&(-&s.e_d_t) + &(&(&p.x_q - &p.x_q_t) * i_q)) / &p.t_q0_t,
        e_q_st: &(&(&s.e_q_t - &s.e_q_st) - &(&(&p.x_d_t - &p.x_d_st) * i_d)) / &p.t_d0_st,
        e_d_st: &(&(&s.e_d_t - &s.e_d_st) + &(&(&p.x_q_t - &p.x_q_st) * i_q)) / &p.t_q0_st,
    }
}

/// Constant machine admittance folded into the bus matrix: `1/(j x_d'')`,
/// machine base.
pub fn gen_machine_admittance(tape: &Tape, p: &GenParamsAd) -> Phasor {
    Phasor::new(tape.constant(0.0), -&(1.0 / &p.x_d_st))
}

/// State-dependent Norton source current, machine base:
/// `(e_q''/x_d'' - j e_d''/x_q'') * u`.
pub fn gen_norton(p: &GenParamsAd, s: &GenState, u: &Phasor) -> Phasor {
    let d_comp = &s.e_q_st / &p.x_d_st;
    let q_comp = -&(&s.e_d_st / &p.x_q_st);
    from_dq(&d_comp, &q_comp, u)
}

/// Subtransient-saliency correction source
/// `j (1/x_q'' - 1/x_d'') v_d u`, machine base. Together with
/// [`gen_norton`] and the folded admittance this reproduces the dq stator
/// equations exactly when `v_d` is the current d-axis terminal voltage.
pub fn gen_saliency_source(p: &GenParamsAd, v_d: &ADScalar, u: &Phasor) -> Phasor {
    let coef = &(1.0 / &p.x_q_st) - &(1.0 / &p.x_d_st);
    u.mul_j().scale_node(&(&coef * v_d))
}

/// Stator currents from dq terminal voltage components, machine base:
/// `i_d = (e_q'' - v_q)/x_d''`, `i_q = (v_d - e_d'')/x_q''`.
pub fn gen_currents_from_dq(
    p: &GenParamsAd,
    s: &GenState,
    v_d: &ADScalar,
    v_q: &ADScalar,
) -> (ADScalar, ADScalar) {
    let i_d = &(&s.e_q_st - v_q) / &p.x_d_st;
    let i_q = &(v_d - &s.e_d_st) / &p.x_q_st;
    (i_d, i_q)
}

/// Stator currents from the terminal voltage phasor.
///
/// `u` must be the rotor unit phasor for `s.delta` (callers already hold it
/// for the Norton source).
pub fn gen_currents(
    p: &GenParamsAd,
    s: &GenState,
    v_term: &Phasor,
    u: &Phasor,
) -> (ADScalar, ADScalar) {
    let (v_d, v_q) = to_dq(v_term, u);
    gen_currents_from_dq(p, s, &v_d, &v_q)
}

/// Everything the simulator needs from a machine's steady-state back-solve.
#[derive(Debug, Clone)]
pub struct GenInit {
    pub state: GenState,
    /// Field voltage that holds the flux states at rest.
    pub e_f: ADScalar,
    /// Mechanical torque balancing the electrical torque.
    pub t_m: ADScalar,
    pub i_d: ADScalar,
    pub i_q: ADScalar,
    /// d-axis terminal voltage, seeding the saliency-correction lag.
    pub v_d: ADScalar,
}

/// Back-solve the machine states from its power-flow terminal condition so
/// every derivative vanishes.
///
/// `v_term` is the terminal voltage (network frame) and `i_term` the machine
/// current on the machine base. Both are typically tape constants coming
/// from the
/// power flow, but the back-solve itself is recorded, so initial states move
/// correctly with any machine parameter that is an optimization variable.
///
/// The rotor angle is the direction of `v + j x_q i`. Its value comes from
/// `atan2` off-tape; recorded arithmetic contributes the exact first-order
/// behaviour around that point, which is all reverse mode needs:
/// `delta = atan2(y0, x0) + (x0 y - y0 x)/(x0^2 + y0^2)` evaluates to the
/// `atan2` value (the recorded fraction is zero at the point) while its
/// partials with respect to the recorded `x`, `y` equal the `atan2` partials.
pub fn gen_init_from_terminal(
    tape: &Tape,
    p: &GenParamsAd,
    v_term: &Phasor,
    i_term: &Phasor,
) -> GenInit {
    let e_q_dir = v_term + &i_term.mul_j().scale_node(&p.x_q);
    let x0 = e_q_dir.re.values();
    let y0 = e_q_dir.im.values();
    let angle: Vec<f64> = y0.iter().zip(&x0).map(|(y, x)| y.atan2(*x)).collect();
    let denom: Vec<f64> = y0.iter().zip(&x0).map(|(y, x)| x * x + y * y).collect();
    let x0_c = tape.constant_lanes(&x0).unwrap();
    let y0_c = tape.constant_lanes(&y0).unwrap();
    let denom_c = tape.constant_lanes(&denom).unwrap();
    let first_order =
        &(&(&x0_c * &e_q_dir.im) - &(&y0_c * &e_q_dir.re)) / &denom_c;
    let delta = &tape.constant_lanes(&angle).unwrap() + &first_order;

    let u = rotor_unit_phasor(&delta);
    let (v_d, v_q) = to_dq(v_term, &u);
    let (i_d, i_q) = to_dq(i_term, &u);

    let e_q_st = &v_q + &(&p.x_d_st * &i_d);
    let e_d_st = &v_d - &(&p.x_q_st * &i_q);
    let e_q_t = &v_q + &(&p.x_d_t * &i_d);
    let e_d_t = &v_d - &(&p.x_q_t * &i_q);
    let e_f = &e_q_t + &(&(&p.x_d - &p.x_d_t) * &i_d);

    let state = GenState {
        delta_omega: tape.constant(0.0),
        delta,
        e_q_t,
        e_d_t,
        e_q_st,
        e_d_st,
    };
    let t_m = gen_torque(p, &state, &i_d, &i_q);
    GenInit {
        state,
        e_f,
        t_m,
        i_d,
        i_q,
        v_d,
    }
}
