//! Dynamic device models: sixth-order synchronous machine, SEXS-type AVR,
//! STAB1-type power system stabilizer.
//!
//! All model quantities are per-unit on the owning machine's MVA base; the
//! simulator handles conversion to the system base at the network boundary.
//! Model functions never fail at runtime: parameter sanity is enforced once
//! at construction, and the arithmetic itself follows IEEE semantics so that
//! a diverging lane carries its non-finite values forward for the simulator
//! to detect.

mod avr;
mod generator;
mod pss;

pub use avr::{sexs_derivatives, sexs_init, sexs_output, SexsParams, SexsParamsAd, SexsState};
pub use generator::{
    from_dq, gen_currents, gen_currents_from_dq, gen_derivatives, gen_init_from_terminal,
    gen_machine_admittance,
    gen_norton, gen_saliency_source, gen_torque, rotor_unit_phasor, to_dq, GenInit, GenParams,
    GenParamsAd, GenState,
};
pub use pss::{stab1_derivatives, stab1_init, Stab1Params, Stab1ParamsAd, Stab1State};

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelError {
    pub device: String,
    pub message: String,
}

impl ModelError {
    pub fn new(device: impl Into<String>, message: impl Into<String>) -> ModelError {
        ModelError {
            device: device.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.device, self.message)
    }
}

impl std::error::Error for ModelError {}
