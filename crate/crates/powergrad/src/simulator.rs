//! System assembly, steady-state initialization, and Euler time stepping.
//!
//! A [`SystemModel`] is plain data straight from configuration. Binding it
//! to a tape yields a [`BoundSystem`]: every device parameter becomes a tape
//! node (an optimization variable where requested, a constant otherwise) and
//! the bus admittance matrix is assembled with the machine admittances
//! folded in. Initialization solves an off-tape power flow — legitimate
//! because the terminal conditions of a PV/slack generator do not depend on
//! any machine parameter — then back-solves all device states on tape and
//! verifies that every derivative and the network equation vanish.
//!
//! Each Euler step solves the faulted or unfaulted network from the Norton
//! sources, evaluates all device derivatives, and advances the states; every
//! value involved stays on the tape, so a loss computed from any recorded
//! signal can be differentiated with respect to any bound parameter.

use crate::models::{
    gen_currents_from_dq, gen_derivatives, gen_init_from_terminal, gen_machine_admittance,
    gen_norton, gen_saliency_source, rotor_unit_phasor, sexs_derivatives, sexs_init, to_dq,
    GenParams, GenParamsAd, GenState, ModelError, SexsParams, SexsParamsAd, SexsState,
    Stab1Params, Stab1ParamsAd, Stab1State, stab1_derivatives, stab1_init,
};
use crate::phasor::{AdmittanceMatrix, NetError, Phasor};
use crate::powerflow::{solve_power_flow, PfBusKind, PfError};
use crate::tape::{ADScalar, AdError, Tape};
use num_complex::Complex64;
use std::collections::HashMap;
use std::fmt;

/// Steady-state residual gate, per-unit.
pub const INIT_RESIDUAL_LIMIT: f64 = 1e-8;
/// Default integration step, seconds.
pub const DEFAULT_DT: f64 = 0.005;

#[derive(Debug)]
pub enum SimError {
    /// Structural problem in the model or schedule; message names the spot.
    Validation(String),
    Model(ModelError),
    PowerFlow(PfError),
    Network(NetError),
    Ad(AdError),
    /// The back-solved steady state failed its self-check.
    InitResidual { residual: f64 },
    /// Every lane went non-finite; the partial trajectory is kept for
    /// diagnostics along with each lane's first failure time.
    Unstable {
        first_failures: Vec<(usize, f64)>,
        trajectory: Trajectory,
    },
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::Validation(msg) => write!(f, "invalid system: {msg}"),
            SimError::Model(e) => write!(f, "{e}"),
            SimError::PowerFlow(e) => write!(f, "{e}"),
            SimError::Network(e) => write!(f, "{e}"),
            SimError::Ad(e) => write!(f, "{e}"),
            SimError::InitResidual { residual } => write!(
                f,
                "steady-state self-check failed: residual {residual:.3e} exceeds \
                 {INIT_RESIDUAL_LIMIT:.0e} (inconsistent setpoints or pinned T_m/V_ref?)"
            ),
            SimError::Unstable {
                first_failures, ..
            } => {
                let (lane, t) = first_failures
                    .iter()
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .copied()
                    .unwrap_or((0, f64::NAN));
                write!(
                    f,
                    "simulation unstable: all {} lanes non-finite, first failure lane {lane} \
                     at t = {t} s",
                    first_failures.len()
                )
            }
        }
    }
}

impl std::error::Error for SimError {}

impl From<ModelError> for SimError {
    fn from(e: ModelError) -> Self {
        SimError::Model(e)
    }
}
impl From<PfError> for SimError {
    fn from(e: PfError) -> Self {
        SimError::PowerFlow(e)
    }
}
impl From<NetError> for SimError {
    fn from(e: NetError) -> Self {
        SimError::Network(e)
    }
}
impl From<AdError> for SimError {
    fn from(e: AdError) -> Self {
        SimError::Ad(e)
    }
}

/// Transmission branch, system-base per-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    /// Total line charging susceptance, split half per end.
    pub b_shunt: f64,
}

/// One generator with optional controllers and its power-flow role.
#[derive(Debug, Clone)]
pub struct GeneratorSpec {
    pub name: String,
    pub bus: usize,
    pub params: GenParams,
    /// Terminal voltage setpoint, pu.
    pub v_setpoint: f64,
    /// Active-power setpoint, MW; ignored for the slack machine.
    pub p_setpoint_mw: Option<f64>,
    pub slack: bool,
    pub avr: Option<SexsParams>,
    pub pss: Option<Stab1Params>,
}

#[derive(Debug, Clone)]
pub struct SystemModel {
    pub bus_names: Vec<String>,
    pub branches: Vec<Branch>,
    pub generators: Vec<GeneratorSpec>,
    pub f_hz: f64,
    pub s_base_mva: f64,
}

/// Which device inside a generator a parameter path refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceKind {
    Machine,
    Avr,
    Pss,
}

/// A resolved parameter path like `G1.H` or `G1.pss.K`.
#[derive(Debug, Clone)]
pub struct ParamRef {
    pub gen_index: usize,
    pub device: DeviceKind,
    pub field: &'static str,
    pub nominal: f64,
}

impl SystemModel {
    pub fn n_bus(&self) -> usize {
        self.bus_names.len()
    }

    pub fn omega_base(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.f_hz
    }

    pub fn generator(&self, name: &str) -> Option<(usize, &GeneratorSpec)> {
        self.generators
            .iter()
            .enumerate()
            .find(|(_, g)| g.name == name)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let err = |msg: String| Err(SimError::Validation(msg));
        if self.bus_names.is_empty() {
            return err("at least one bus is required".into());
        }
        if !(self.f_hz > 0.0) {
            return err(format!("system frequency must be positive, got {}", self.f_hz));
        }
        if !(self.s_base_mva > 0.0) {
            return err(format!("system base must be positive, got {}", self.s_base_mva));
        }
        for (i, name) in self.bus_names.iter().enumerate() {
            if name.is_empty() {
                return err(format!("bus {i} has an empty name"));
            }
            if self.bus_names[..i].contains(name) {
                return err(format!("duplicate bus name {name}"));
            }
        }
        for (i, br) in self.branches.iter().enumerate() {
            if br.from >= self.n_bus() || br.to >= self.n_bus() {
                return err(format!(
                    "branch {i} references bus {} but only {} buses exist",
                    br.from.max(br.to),
                    self.n_bus()
                ));
            }
            if br.from == br.to {
                return err(format!("branch {i} connects bus {} to itself", br.from));
            }
            if br.r * br.r + br.x * br.x == 0.0 {
                return err(format!("branch {i} has zero impedance"));
            }
        }
        let mut slack_count = 0;
        let mut used_buses = vec![false; self.n_bus()];
        for (i, g) in self.generators.iter().enumerate() {
            if g.name.is_empty() || g.name.contains('.') {
                return err(format!(
                    "generator {i} name {:?} must be non-empty and must not contain '.'",
                    g.name
                ));
            }
            if self.generators[..i].iter().any(|o| o.name == g.name) {
                return err(format!("duplicate generator name {}", g.name));
            }
            if g.bus >= self.n_bus() {
                return err(format!(
                    "generator {} references bus {} but only {} buses exist",
                    g.name,
                    g.bus,
                    self.n_bus()
                ));
            }
            if used_buses[g.bus] {
                return err(format!(
                    "bus {} hosts more than one generator",
                    self.bus_names[g.bus]
                ));
            }
            used_buses[g.bus] = true;
            if !(g.v_setpoint > 0.0) {
                return err(format!(
                    "generator {} voltage setpoint must be positive, got {}",
                    g.name, g.v_setpoint
                ));
            }
            if g.slack {
                slack_count += 1;
            } else if g.p_setpoint_mw.is_none() {
                return err(format!(
                    "generator {} is not the slack and needs an active-power setpoint",
                    g.name
                ));
            }
            g.params.validate(&g.name)?;
            if let Some(avr) = &g.avr {
                avr.validate(&g.name)?;
            }
            if let Some(pss) = &g.pss {
                pss.validate(&g.name)?;
                if g.avr.is_none() {
                    return err(format!(
                        "generator {} has a PSS but no AVR to feed its output into",
                        g.name
                    ));
                }
            }
        }
        if self.generators.is_empty() {
            return err("at least one generator is required".into());
        }
        if slack_count != 1 {
            return err(format!(
                "exactly one slack generator is required, found {slack_count}"
            ));
        }
        Ok(())
    }

    /// Resolves `GEN.FIELD`, `GEN.avr.FIELD`, or `GEN.pss.FIELD`.
    pub fn resolve_param(&self, path: &str) -> Result<ParamRef, SimError> {
        let err = |msg: String| Err(SimError::Validation(msg));
        let parts: Vec<&str> = path.split('.').collect();
        let (gen_index, gen) = match self.generator(parts[0]) {
            Some(pair) => pair,
            None => {
                return err(format!(
                    "parameter {path:?}: no generator named {:?} (have: {})",
                    parts[0],
                    self.generators
                        .iter()
                        .map(|g| g.name.as_str())
                        .collect::<Vec<_>>()
                        .join(", ")
                ))
            }
        };
        let static_field = |names: &[&'static str], f: &str| -> Option<&'static str> {
            names.iter().copied().find(|n| *n == f)
        };
        match parts.as_slice() {
            [_, field] => {
                let field = static_field(&GenParams::PARAM_NAMES, field).ok_or_else(|| {
                    SimError::Validation(format!(
                        "parameter {path:?}: unknown machine field {field:?} (have: {})",
                        GenParams::PARAM_NAMES.join(", ")
                    ))
                })?;
                Ok(ParamRef {
                    gen_index,
                    device: DeviceKind::Machine,
                    field,
                    nominal: gen.params.value_of(field).unwrap(),
                })
            }
            [_, "avr", field] => {
                let avr = gen.avr.as_ref().ok_or_else(|| {
                    SimError::Validation(format!(
                        "parameter {path:?}: generator {} has no AVR",
                        gen.name
                    ))
                })?;
                let field = static_field(&SexsParams::PARAM_NAMES, field).ok_or_else(|| {
                    SimError::Validation(format!(
                        "parameter {path:?}: unknown AVR field {field:?} (have: {})",
                        SexsParams::PARAM_NAMES.join(", ")
                    ))
                })?;
                Ok(ParamRef {
                    gen_index,
                    device: DeviceKind::Avr,
                    field,
                    nominal: avr.value_of(field).unwrap(),
                })
            }
            [_, "pss", field] => {
                let pss = gen.pss.as_ref().ok_or_else(|| {
                    SimError::Validation(format!(
                        "parameter {path:?}: generator {} has no PSS",
                        gen.name
                    ))
                })?;
                let field = static_field(&Stab1Params::PARAM_NAMES, field).ok_or_else(|| {
                    SimError::Validation(format!(
                        "parameter {path:?}: unknown PSS field {field:?} (have: {})",
                        Stab1Params::PARAM_NAMES.join(", ")
                    ))
                })?;
                Ok(ParamRef {
                    gen_index,
                    device: DeviceKind::Pss,
                    field,
                    nominal: pss.value_of(field).unwrap(),
                })
            }
            _ => err(format!(
                "parameter {path:?}: expected GEN.FIELD, GEN.avr.FIELD, or GEN.pss.FIELD"
            )),
        }
    }
}

/// One generator's tape-bound devices.
#[derive(Debug, Clone)]
pub struct BoundGen {
    pub name: String,
    pub bus: usize,
    pub params: GenParamsAd,
    pub avr: Option<SexsParamsAd>,
    pub pss: Option<Stab1ParamsAd>,
    /// Machine-to-system base ratio `S_n / S_base`.
    pub base_ratio: f64,
    /// Whether the subtransient-saliency correction source can be nonzero.
    pub saliency_active: bool,
}

/// A system bound to one tape: parameters as nodes, admittances assembled.
#[derive(Debug, Clone)]
pub struct BoundSystem {
    pub tape: Tape,
    pub model: SystemModel,
    pub gens: Vec<BoundGen>,
    pub y_dyn: AdmittanceMatrix,
    pub omega_base: f64,
}

/// Binds every device parameter, taking nodes from `overrides` (keyed by
/// parameter path) and tape constants elsewhere.
pub fn bind_system(
    tape: &Tape,
    model: &SystemModel,
    overrides: &HashMap<String, ADScalar>,
) -> Result<BoundSystem, SimError> {
    model.validate()?;
    for path in overrides.keys() {
        model.resolve_param(path)?;
    }
    let n = model.n_bus();

    let mut gens = Vec::with_capacity(model.generators.len());
    for spec in &model.generators {
        let params = GenParamsAd::bind(tape, &spec.params, |field| {
            overrides.get(&format!("{}.{}", spec.name, field)).cloned()
        });
        let avr = spec.avr.as_ref().map(|avr| {
            SexsParamsAd::bind(tape, avr, |field| {
                overrides
                    .get(&format!("{}.avr.{}", spec.name, field))
                    .cloned()
            })
        });
        let pss = spec.pss.as_ref().map(|pss| {
            Stab1ParamsAd::bind(tape, pss, |field| {
                overrides
                    .get(&format!("{}.pss.{}", spec.name, field))
                    .cloned()
            })
        });
        let subtransient_overridden = overrides.contains_key(&format!("{}.X_d_st", spec.name))
            || overrides.contains_key(&format!("{}.X_q_st", spec.name));
        gens.push(BoundGen {
            name: spec.name.clone(),
            bus: spec.bus,
            params,
            avr,
            pss,
            base_ratio: spec.params.s_n / model.s_base_mva,
            saliency_active: spec.params.x_d_st != spec.params.x_q_st
                || subtransient_overridden,
        });
    }

    // Branch part of the admittance matrix is parameter-free.
    let mut y_net = vec![Complex64::new(0.0, 0.0); n * n];
    for br in &model.branches {
        let y_series = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
        let y_half_shunt = Complex64::new(0.0, br.b_shunt / 2.0);
        y_net[br.from * n + br.from] += y_series + y_half_shunt;
        y_net[br.to * n + br.to] += y_series + y_half_shunt;
        y_net[br.from * n + br.to] -= y_series;
        y_net[br.to * n + br.from] -= y_series;
    }
    let mut entries: Vec<Phasor> = y_net
        .iter()
        .map(|y| Phasor::constant(tape, y.re, y.im))
        .collect();
    for g in &gens {
        let y_m = gen_machine_admittance(tape, &g.params).scale(g.base_ratio);
        entries[g.bus * n + g.bus] = &entries[g.bus * n + g.bus] + &y_m;
    }
    let y_dyn = AdmittanceMatrix::new(n, entries)?;

    Ok(BoundSystem {
        tape: tape.clone(),
        model: model.clone(),
        gens,
        y_dyn,
        omega_base: model.omega_base(),
    })
}

/// Per-generator dynamic state plus the run-constant nodes that ride along.
#[derive(Debug, Clone)]
pub struct GenRunState {
    pub gen: GenState,
    pub avr: Option<SexsState>,
    pub pss: Option<Stab1State>,
    /// Mechanical torque, fixed for the whole run (no governor).
    pub t_m: ADScalar,
    /// Field voltage for machines without an AVR.
    pub e_f_fixed: Option<ADScalar>,
    /// d-axis terminal voltage of the previous step, feeding the
    /// saliency-correction source.
    pub v_d_prev: ADScalar,
}

#[derive(Debug, Clone)]
pub struct SystemState {
    pub gens: Vec<GenRunState>,
}

/// Steady-state solution: initial states, initial bus voltages, and the
/// achieved residual.
#[derive(Debug, Clone)]
pub struct SimInit {
    pub state: SystemState,
    pub v_bus: Vec<Phasor>,
    pub residual: f64,
}

/// Solves the power flow off-tape, back-solves all device states on tape,
/// stores the derived AVR setpoints, and self-checks that every derivative
/// and the network equation vanish.
pub fn init_steady_state(bound: &mut BoundSystem) -> Result<SimInit, SimError> {
    let tape = bound.tape.clone();
    let model = &bound.model;
    let n = model.n_bus();

    // Branch-only power flow: generators are boundary conditions here, not
    // admittances.
    let mut y_pf = vec![Complex64::new(0.0, 0.0); n * n];
    for br in &model.branches {
        let y_series = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
        let y_half_shunt = Complex64::new(0.0, br.b_shunt / 2.0);
        y_pf[br.from * n + br.from] += y_series + y_half_shunt;
        y_pf[br.to * n + br.to] += y_series + y_half_shunt;
        y_pf[br.from * n + br.to] -= y_series;
        y_pf[br.to * n + br.from] -= y_series;
    }
    let buses: Vec<PfBusKind> = (0..n)
        .map(|b| {
            match model.generators.iter().find(|g| g.bus == b) {
                Some(g) if g.slack => PfBusKind::Slack { v: g.v_setpoint },
                Some(g) => PfBusKind::Pv {
                    p: g.p_setpoint_mw.unwrap_or(0.0) / model.s_base_mva,
                    v: g.v_setpoint,
                },
                None => PfBusKind::Pq { p: 0.0, q: 0.0 },
            }
        })
        .collect();
    let pf = solve_power_flow(&y_pf, &buses)?;

    let v_bus: Vec<Phasor> = pf
        .v
        .iter()
        .map(|v| Phasor::constant(&tape, v.re, v.im))
        .collect();

    let mut gen_states = Vec::with_capacity(bound.gens.len());
    for (gi, g) in bound.gens.iter_mut().enumerate() {
        let spec = &model.generators[gi];
        let v_c = pf.v[g.bus];
        // Net bus injection equals the machine injection (one machine per
        // bus, no loads); converted to the machine base.
        let i_sys = (pf.s[g.bus] / v_c).conj();
        let i_mach = i_sys / g.base_ratio;
        let v_term = Phasor::constant(&tape, v_c.re, v_c.im);
        let i_term = Phasor::constant(&tape, i_mach.re, i_mach.im);

        let init = gen_init_from_terminal(&tape, &g.params, &v_term, &i_term);
        let t_m = match spec.params.t_m {
            Some(v) => tape.constant(v),
            None => init.t_m.clone(),
        };
        let (avr_state, e_f_fixed) = match g.avr.as_mut() {
            Some(avr) => {
                let v_meas0 = v_term.abs2().sqrt_signal();
                let (state, v_ref) = sexs_init(avr, &init.e_f, &v_meas0);
                if spec.avr.as_ref().and_then(|a| a.v_ref).is_none() {
                    avr.v_ref = v_ref;
                }
                (Some(state), None)
            }
            None => (None, Some(init.e_f.clone())),
        };
        let pss_state = g
            .pss
            .as_ref()
            .map(|_| stab1_init(&tape.constant(0.0), &tape));
        gen_states.push(GenRunState {
            gen: init.state,
            avr: avr_state,
            pss: pss_state,
            t_m,
            e_f_fixed,
            v_d_prev: init.v_d,
        });
    }

    let state = SystemState { gens: gen_states };

    // Self-check: the dynamic network equation must hold at the power-flow
    // voltages, and every device derivative must vanish.
    let rhs = assemble_sources(bound, &state)?;
    let net_residual = bound
        .y_dyn
        .residual_inf(&v_bus, &rhs)
        .into_iter()
        .fold(0.0f64, f64::max);
    let derivs = device_derivatives(bound, &state, &v_bus);
    let device_residual = derivs
        .iter()
        .map(|d| d.max_abs_value())
        .fold(0.0f64, f64::max);
    let residual = net_residual.max(device_residual);
    if !(residual < INIT_RESIDUAL_LIMIT) {
        return Err(SimError::InitResidual { residual });
    }

    Ok(SimInit {
        state,
        v_bus,
        residual,
    })
}

/// Derivatives of one generator's devices, plus step byproducts.
#[derive(Debug, Clone)]
pub struct GenDerivs {
    pub gen: GenState,
    pub avr: Option<SexsState>,
    pub pss: Option<Stab1State>,
    /// d-axis terminal voltage at this evaluation, lagged into the next
    /// step's saliency source.
    pub v_d: ADScalar,
}

impl GenDerivs {
    pub fn max_abs_value(&self) -> f64 {
        let mut m = self.gen.max_abs_value();
        if let Some(avr) = &self.avr {
            m = m.max(avr.max_abs_value());
        }
        if let Some(pss) = &self.pss {
            m = m.max(pss.max_abs_value());
        }
        m
    }
}

/// Norton current injections per bus, system base.
pub fn assemble_sources(
    bound: &BoundSystem,
    state: &SystemState,
) -> Result<Vec<Phasor>, SimError> {
    let tape = &bound.tape;
    let mut rhs: Vec<Phasor> = (0..bound.model.n_bus())
        .map(|_| Phasor::zero(tape))
        .collect();
    for (g, s) in bound.gens.iter().zip(&state.gens) {
        let u = rotor_unit_phasor(&s.gen.delta);
        let mut inj = gen_norton(&g.params, &s.gen, &u);
        if g.saliency_active {
            inj = &inj + &gen_saliency_source(&g.params, &s.v_d_prev, &u);
        }
        rhs[g.bus] = &rhs[g.bus] + &inj.scale(g.base_ratio);
    }
    Ok(rhs)
}

/// Evaluates every device's derivatives at the given bus voltages.
pub fn device_derivatives(
    bound: &BoundSystem,
    state: &SystemState,
    v_bus: &[Phasor],
) -> Vec<GenDerivs> {
    let tape = &bound.tape;
    bound
        .gens
        .iter()
        .zip(&state.gens)
        .map(|(g, s)| {
            let u = rotor_unit_phasor(&s.gen.delta);
            let v_term = &v_bus[g.bus];
            let (v_d, v_q) = to_dq(v_term, &u);
            let (i_d, i_q) = gen_currents_from_dq(&g.params, &s.gen, &v_d, &v_q);

            let (pss_dx, v_pss) = match (g.pss.as_ref(), s.pss.as_ref()) {
                (Some(p), Some(ps)) => {
                    let (dx, v) = stab1_derivatives(p, ps, &s.gen.delta_omega);
                    (Some(dx), Some(v))
                }
                _ => (None, None),
            };
            let (avr_dx, e_f) = match (g.avr.as_ref(), s.avr.as_ref()) {
                (Some(a), Some(avr_state)) => {
                    let v_meas = v_term.abs2().sqrt_signal();
                    let v_pss = v_pss.unwrap_or_else(|| tape.constant(0.0));
                    let (dx, e_f) = sexs_derivatives(a, avr_state, &v_meas, &v_pss);
                    (Some(dx), e_f)
                }
                _ => (
                    None,
                    s.e_f_fixed
                        .clone()
                        .expect("machine without AVR must carry a fixed field voltage"),
                ),
            };
            let gen_dx = gen_derivatives(
                &g.params,
                &s.gen,
                &i_d,
                &i_q,
                &e_f,
                &s.t_m,
                bound.omega_base,
            );
            GenDerivs {
                gen: gen_dx,
                avr: avr_dx,
                pss: pss_dx,
                v_d,
            }
        })
        .collect()
}

fn advance(state: &SystemState, derivs: &[GenDerivs], dt: f64) -> SystemState {
    SystemState {
        gens: state
            .gens
            .iter()
            .zip(derivs)
            .map(|(s, d)| GenRunState {
                gen: s.gen.euler(&d.gen, dt),
                avr: s
                    .avr
                    .as_ref()
                    .map(|a| a.euler(d.avr.as_ref().expect("avr derivs"), dt)),
                pss: s
                    .pss
                    .as_ref()
                    .map(|p| p.euler(d.pss.as_ref().expect("pss derivs"), dt)),
                t_m: s.t_m.clone(),
                e_f_fixed: s.e_f_fixed.clone(),
                v_d_prev: d.v_d.clone(),
            })
            .collect(),
    }
}

/// One explicit Euler step: solve the network, evaluate derivatives, advance.
/// Returns the next state and the bus voltages used.
pub fn step_euler(
    bound: &BoundSystem,
    state: &SystemState,
    dt: f64,
) -> Result<(SystemState, Vec<Phasor>), SimError> {
    let rhs = assemble_sources(bound, state)?;
    let v_bus = bound.y_dyn.solve(&rhs)?;
    let derivs = device_derivatives(bound, state, &v_bus);
    Ok((advance(state, &derivs, dt), v_bus))
}

/// Fault-schedule actions; the fault is a shunt admittance overlay.
#[derive(Debug, Clone, PartialEq)]
pub enum EventAction {
    ApplyFault { bus: usize, y: Complex64 },
    ClearFault,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub t: f64,
    pub action: EventAction,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventSchedule {
    pub events: Vec<Event>,
}

/// Maps a time onto the step grid; `None` when it is not an integer
/// multiple of `dt` (relative tolerance 1e-6 of a step).
pub fn grid_index(t: f64, dt: f64) -> Option<usize> {
    if !(dt > 0.0) || t < 0.0 {
        return None;
    }
    let r = t / dt;
    let k = r.round();
    ((r - k).abs() <= 1e-6 * r.abs().max(1.0)).then_some(k as usize)
}

impl EventSchedule {
    /// Checks ordering, grid alignment, and bus references; returns each
    /// event's step index.
    pub fn validate(&self, dt: f64, t_end: f64, n_bus: usize) -> Result<Vec<usize>, SimError> {
        let err = |msg: String| Err(SimError::Validation(msg));
        let mut steps = Vec::with_capacity(self.events.len());
        for (i, ev) in self.events.iter().enumerate() {
            if i > 0 && ev.t <= self.events[i - 1].t {
                return err(format!(
                    "event times must be strictly increasing; event {i} at t = {} follows t = {}",
                    ev.t,
                    self.events[i - 1].t
                ));
            }
            if ev.t > t_end {
                return err(format!("event {i} at t = {} is beyond t_end = {t_end}", ev.t));
            }
            let k = match grid_index(ev.t, dt) {
                Some(k) => k,
                None => {
                    return err(format!(
                        "event {i} at t = {} is not aligned to the dt = {dt} step grid \
                         (schedules are rejected rather than snapped)",
                        ev.t
                    ))
                }
            };
            if let EventAction::ApplyFault { bus, y } = &ev.action {
                if *bus >= n_bus {
                    return err(format!(
                        "event {i} faults bus {bus} but only {n_bus} buses exist"
                    ));
                }
                if !y.re.is_finite() || !y.im.is_finite() {
                    return err(format!("event {i} has a non-finite fault admittance"));
                }
            }
            steps.push(k);
        }
        Ok(steps)
    }
}

/// Recorded simulation output. Signal values stay on the tape (handles only)
/// until detached, so losses built from them remain differentiable.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub signals: Vec<(String, Vec<ADScalar>)>,
    /// Per lane: time of the first non-finite value, if any.
    pub lane_first_failure: Vec<Option<f64>>,
}

impl Trajectory {
    pub fn signal(&self, name: &str) -> Option<&[ADScalar]> {
        self.signals
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.as_slice())
    }

    pub fn lane_count(&self) -> usize {
        self.lane_first_failure.len()
    }

    /// One lane of one signal as plain numbers.
    pub fn lane_series(&self, name: &str, lane: usize) -> Option<Vec<f64>> {
        self.signal(name)
            .map(|nodes| nodes.iter().map(|n| n.value(lane)).collect())
    }

    /// Copies every signal off the tape.
    pub fn detach(&self) -> DetachedTrajectory {
        DetachedTrajectory {
            dt: self.dt,
            times: self.times.clone(),
            signals: self
                .signals
                .iter()
                .map(|(name, nodes)| {
                    (name.clone(), nodes.iter().map(|n| n.values()).collect())
                })
                .collect(),
            lane_first_failure: self.lane_first_failure.clone(),
        }
    }
}

/// A trajectory copied off the tape: `values[sample][lane]` per signal.
#[derive(Debug, Clone, PartialEq)]
pub struct DetachedTrajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub signals: Vec<(String, Vec<Vec<f64>>)>,
    pub lane_first_failure: Vec<Option<f64>>,
}

impl DetachedTrajectory {
    pub fn signal(&self, name: &str) -> Option<&[Vec<f64>]> {
        self.signals
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.as_slice())
    }

    pub fn lane_series(&self, name: &str, lane: usize) -> Option<Vec<f64>> {
        self.signal(name)
            .map(|samples| samples.iter().map(|v| v[lane]).collect())
    }
}

/// Integrates the system from `init` to `t_end`, applying scheduled fault
/// events at their grid times. Records `<gen>.delta_omega` for every
/// machine. Lanes that go non-finite are noted and carried along (they
/// poison only themselves); the run aborts only when every lane is dead.
pub fn run(
    bound: &mut BoundSystem,
    init: &SimInit,
    schedule: &EventSchedule,
    dt: f64,
    t_end: f64,
) -> Result<Trajectory, SimError> {
    if !(dt > 0.0) {
        return Err(SimError::Validation(format!("dt must be positive, got {dt}")));
    }
    let steps = grid_index(t_end, dt).filter(|&k| k > 0).ok_or_else(|| {
        SimError::Validation(format!(
            "t_end = {t_end} must be a positive integer multiple of dt = {dt}"
        ))
    })?;
    let event_steps = schedule.validate(dt, t_end, bound.model.n_bus())?;
    let lanes = bound.tape.lane_count();

    let mut state = init.state.clone();
    let mut times = Vec::with_capacity(steps + 1);
    times.push(0.0);
    let mut signals: Vec<(String, Vec<ADScalar>)> = bound
        .gens
        .iter()
        .zip(&state.gens)
        .map(|(g, s)| {
            let mut nodes = Vec::with_capacity(steps + 1);
            nodes.push(s.gen.delta_omega.clone());
            (format!("{}.delta_omega", g.name), nodes)
        })
        .collect();
    let mut first_failure: Vec<Option<f64>> = vec![None; lanes];

    let mut next_event = 0usize;
    for k in 0..steps {
        while next_event < event_steps.len() && event_steps[next_event] == k {
            match &schedule.events[next_event].action {
                EventAction::ApplyFault { bus, y } => {
                    let y_f = Phasor::constant(&bound.tape, y.re, y.im);
                    bound.y_dyn.apply_fault(*bus, y_f)?;
                }
                EventAction::ClearFault => bound.y_dyn.clear_fault(),
            }
            next_event += 1;
        }

        let (next, v_bus) = step_euler(bound, &state, dt)?;
        let t_next = (k + 1) as f64 * dt;

        // A lane fails when its solved voltages or its advanced speed
        // deviations stop being finite.
        for lane in 0..lanes {
            if first_failure[lane].is_some() {
                continue;
            }
            let v_bad = v_bus
                .iter()
                .any(|v| !{
                    let (re, im) = v.value(lane);
                    re.is_finite() && im.is_finite()
                });
            let s_bad = next
                .gens
                .iter()
                .any(|g| !g.gen.delta_omega.value(lane).is_finite());
            if v_bad || s_bad {
                first_failure[lane] = Some(if v_bad { k as f64 * dt } else { t_next });
            }
        }

        state = next;
        times.push(t_next);
        for ((_, nodes), s) in signals.iter_mut().zip(&state.gens) {
            nodes.push(s.gen.delta_omega.clone());
        }

        if first_failure.iter().all(|f| f.is_some()) {
            let trajectory = Trajectory {
                dt,
                times,
                signals,
                lane_first_failure: first_failure.clone(),
            };
            return Err(SimError::Unstable {
                first_failures: first_failure
                    .iter()
                    .enumerate()
                    .map(|(l, f)| (l, f.unwrap()))
                    .collect(),
                trajectory,
            });
        }
    }

    Ok(Trajectory {
        dt,
        times,
        signals,
        lane_first_failure: first_failure,
    })
}

/// The two-machine single-machine-infinite-bus system used across tests:
/// one study generator and a very large machine standing in for the grid.
pub fn smib_model() -> SystemModel {
    SystemModel {
        bus_names: vec!["B1".into(), "B2".into()],
        branches: vec![Branch {
            from: 0,
            to: 1,
            r: 0.0,
            x: 0.65,
            b_shunt: 0.0,
        }],
        generators: vec![
            GeneratorSpec {
                name: "G1".into(),
                bus: 0,
                params: GenParams {
                    h: 3.5,
                    d: 0.0,
                    x_d: 1.81,
                    x_q: 1.76,
                    x_d_t: 0.3,
                    x_q_t: 0.65,
                    x_d_st: 0.23,
                    x_q_st: 0.23,
                    t_d0_t: 8.0,
                    t_q0_t: 1.0,
                    t_d0_st: 0.03,
                    t_q0_st: 0.07,
                    s_n: 2200.0,
                    t_m: None,
                },
                v_setpoint: 1.0,
                p_setpoint_mw: Some(1998.0),
                slack: false,
                avr: None,
                pss: None,
            },
            GeneratorSpec {
                name: "IB".into(),
                bus: 1,
                params: GenParams {
                    h: 1e5,
                    d: 0.0,
                    x_d: 1.81,
                    x_q: 1.76,
                    x_d_t: 0.3,
                    x_q_t: 0.65,
                    x_d_st: 0.23,
                    x_q_st: 0.23,
                    t_d0_t: 8.0,
                    t_q0_t: 1.0,
                    t_d0_st: 0.03,
                    t_q0_st: 0.07,
                    s_n: 1e6,
                    t_m: None,
                },
                v_setpoint: 0.90081,
                p_setpoint_mw: None,
                slack: true,
                avr: None,
                pss: None,
            },
        ],
        f_hz: 50.0,
        s_base_mva: 2200.0,
    }
}

/// The default five-cycle solid short circuit at the study generator's bus.
pub fn smib_fault_schedule() -> EventSchedule {
    EventSchedule {
        events: vec![
            Event {
                t: 1.0,
                action: EventAction::ApplyFault {
                    bus: 0,
                    y: Complex64::new(1e5, -1e5),
                },
            },
            Event {
                t: 1.05,
                action: EventAction::ClearFault,
            },
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind_default(tape: &Tape, model: &SystemModel) -> BoundSystem {
        bind_system(tape, model, &HashMap::new()).unwrap()
    }

    #[test]
    fn test_validation_catches_structural_mistakes() {
        let mut m = smib_model();
        m.generators[0].bus = 7;
        assert!(matches!(m.validate(), Err(SimError::Validation(_))));

        let mut m = smib_model();
        m.generators[1].slack = false;
        assert!(matches!(m.validate(), Err(SimError::Validation(_))));

        let mut m = smib_model();
        m.generators[0].pss = Some(Stab1Params::default());
        let msg = match m.validate() {
            Err(SimError::Validation(msg)) => msg,
            other => panic!("expected validation error, got {other:?}"),
        };
        assert!(msg.contains("PSS"), "got {msg}");
    }

    #[test]
    fn test_param_resolution() {
        let mut m = smib_model();
        m.generators[0].avr = Some(SexsParams::default());
        m.generators[0].pss = Some(Stab1Params::default());
        assert_eq!(m.resolve_param("G1.H").unwrap().nominal, 3.5);
        assert_eq!(m.resolve_param("G1.X_d_t").unwrap().nominal, 0.3);
        assert_eq!(m.resolve_param("G1.pss.T_w").unwrap().nominal, 11.0);
        assert_eq!(m.resolve_param("G1.avr.K").unwrap().nominal, 100.0);
        assert!(m.resolve_param("G9.H").is_err());
        assert!(m.resolve_param("G1.nope").is_err());
        assert!(m.resolve_param("IB.pss.K").is_err());
    }

    #[test]
    fn test_smib_init_residual_is_tiny() {
        let tape = Tape::new(1).unwrap();
        let mut bound = bind_default(&tape, &smib_model());
        let init = init_steady_state(&mut bound).unwrap();
        assert!(
            init.residual < INIT_RESIDUAL_LIMIT,
            "residual {}",
            init.residual
        );
    }

    #[test]
    fn test_smib_init_residual_with_controllers() {
        let mut m = smib_model();
        m.generators[0].avr = Some(SexsParams::default());
        m.generators[0].pss = Some(Stab1Params::default());
        let tape = Tape::new(1).unwrap();
        let mut bound = bind_default(&tape, &m);
        let init = init_steady_state(&mut bound).unwrap();
        assert!(
            init.residual < INIT_RESIDUAL_LIMIT,
            "residual {}",
            init.residual
        );
    }

    #[test]
    fn test_one_step_from_steady_state_changes_nothing() {
        let tape = Tape::new(1).unwrap();
        let mut bound = bind_default(&tape, &smib_model());
        let init = init_steady_state(&mut bound).unwrap();
        let (next, _) = step_euler(&bound, &init.state, DEFAULT_DT).unwrap();
        for (s0, s1) in init.state.gens.iter().zip(&next.gens) {
            for (a, b) in s0.gen.as_array().iter().zip(s1.gen.as_array().iter()) {
                assert!(
                    (a.value(0) - b.value(0)).abs() < 1e-10,
                    "state moved by {}",
                    (a.value(0) - b.value(0)).abs()
                );
            }
        }
    }

    #[test]
    fn test_flat_run_without_events() {
        let tape = Tape::new(1).unwrap();
        let mut bound = bind_default(&tape, &smib_model());
        let init = init_steady_state(&mut bound).unwrap();
        let traj = run(
            &mut bound,
            &init,
            &EventSchedule::default(),
            DEFAULT_DT,
            0.5,
        )
        .unwrap();
        assert_eq!(traj.times.len(), 101);
        let series = traj.lane_series("G1.delta_omega", 0).unwrap();
        let peak = series.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak < 1e-10, "steady run drifted to {peak}");
    }

    #[test]
    fn test_fault_produces_oscillation_and_depressed_voltage() {
        let tape = Tape::new(1).unwrap();
        let mut bound = bind_default(&tape, &smib_model());
        let init = init_steady_state(&mut bound).unwrap();
        let traj = run(
            &mut bound,
            &init,
            &smib_fault_schedule(),
            DEFAULT_DT,
            3.0,
        )
        .unwrap();
        let series = traj.lane_series("G1.delta_omega", 0).unwrap();
        let pre_fault = series[..200].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let post = series[200..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(pre_fault < 1e-10);
        assert!(post > 1e-3, "fault produced no swing: peak {post}");
        assert!(traj.lane_first_failure[0].is_none());
    }

    #[test]
    fn test_misaligned_event_is_rejected() {
        let tape = Tape::new(1).unwrap();
        let mut bound = bind_default(&tape, &smib_model());
        let init = init_steady_state(&mut bound).unwrap();
        let schedule = EventSchedule {
            events: vec![Event {
                t: 1.0001,
                action: EventAction::ClearFault,
            }],
        };
        match run(&mut bound, &init, &schedule, DEFAULT_DT, 2.0) {
            Err(SimError::Validation(msg)) => assert!(msg.contains("aligned"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn test_unstable_run_returns_partial_trajectory() {
        // dt far beyond the subtransient stability limit makes Euler diverge
        // once the fault perturbs the equilibrium.
        let tape = Tape::new(1).unwrap();
        let mut bound = bind_default(&tape, &smib_model());
        let init = init_steady_state(&mut bound).unwrap();
        let schedule = EventSchedule {
            events: vec![Event {
                t: 1.0,
                action: EventAction::ApplyFault {
                    bus: 0,
                    y: Complex64::new(1e5, -1e5),
                },
            }],
        };
        match run(&mut bound, &init, &schedule, 1.0, 300.0) {
            Err(SimError::Unstable {
                first_failures,
                trajectory,
            }) => {
                assert_eq!(first_failures.len(), 1);
                assert!(first_failures[0].1 > 1.0);
                assert!(!trajectory.times.is_empty());
                assert_eq!(trajectory.lane_first_failure[0], Some(first_failures[0].1));
            }
            other => panic!("expected instability, got {:?}", other.map(|t| t.times.len())),
        }
    }

    #[test]
    fn test_fault_depresses_bus_voltage_while_active() {
        let tape = Tape::new(1).unwrap();
        let mut bound = bind_default(&tape, &smib_model());
        let init = init_steady_state(&mut bound).unwrap();
        // Step to the fault window manually.
        let mut state = init.state.clone();
        for _ in 0..200 {
            let (next, _) = step_euler(&bound, &state, DEFAULT_DT).unwrap();
            state = next;
        }
        let y_f = Phasor::constant(&tape, 1e5, -1e5);
        bound.y_dyn.apply_fault(0, y_f).unwrap();
        let (_, v_faulted) = step_euler(&bound, &state, DEFAULT_DT).unwrap();
        assert!(v_faulted[0].abs2_value(0) < 1e-4, "fault barely moved |V|");
        bound.y_dyn.clear_fault();
        let (_, v_clear) = step_euler(&bound, &state, DEFAULT_DT).unwrap();
        assert!(v_clear[0].abs2_value(0) > 0.9);
    }

    #[test]
    fn test_grid_index_alignment() {
        assert_eq!(grid_index(1.0, 0.005), Some(200));
        assert_eq!(grid_index(0.0, 0.005), Some(0));
        assert_eq!(grid_index(10.0, 0.005), Some(2000));
        assert_eq!(grid_index(1.0001, 0.005), None);
        assert_eq!(grid_index(-1.0, 0.005), None);
        // 0.3 / 0.1 is not exactly 3 in floating point; the tolerance must
        // absorb that.
        assert_eq!(grid_index(0.3, 0.1), Some(3));
    }
}
