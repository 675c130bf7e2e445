//! Differentiable dynamic simulation of small power systems.
//!
//! The crate records every arithmetic operation of a transient simulation on
//! an automatic-differentiation tape, so the sensitivity of any scalar loss
//! (for example, the mismatch between a simulated and a measured rotor-speed
//! trajectory) with respect to any machine or controller parameter comes out
//! of a single reverse sweep. On top of that sit a gradient-descent
//! parameter-identification loop, a PSS tuning loop, and a loss-landscape
//! scanner, all driven from TOML experiment configs via the `powergrad`
//! binary.
//!
//! Module map:
//!
//! * [`tape`] — reverse-mode AD: the tape, `ADScalar`, backward sweep.
//! * [`phasor`] — complex arithmetic over tape nodes and the network solve.
//! * [`models`] — sixth-order synchronous machine, SEXS AVR, STAB1 PSS.
//! * [`powerflow`] — small Newton power flow used for steady-state init.
//! * [`simulator`] — system assembly, steady-state init, Euler time stepping.
//! * [`optimizer`] — losses, clipped gradient descent, landscape scan.
//! * [`config`], [`io`], [`experiment`] — experiment configs, CSV/series
//!   handling, and the end-to-end experiment runners behind the CLI.

pub mod config;
pub mod experiment;
pub mod io;
pub mod models;
pub mod optimizer;
pub mod phasor;
pub mod powerflow;
pub mod simulator;
pub mod tape;
