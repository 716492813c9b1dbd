//! Primal-dual feedback controllers that steer networked passive LTI plants
//! to the solution of a steady-state optimization problem.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augpdgd;
pub mod certificate;
pub mod closedloop;
pub mod linalg;
pub mod microgrid;
pub mod netplant;
pub mod optprogram;
pub mod scalar;

pub use scalar::{lit, to_f64, Scalar};

pub type Subsystem = netplant::Subsystem<f64>;
pub type InterconnectionMap = netplant::InterconnectionMap<f64>;
pub type Plant = netplant::CompactPlant<f64>;
pub type PassivityCertificate = netplant::PassivityCertificate<f64>;
pub type Program = optprogram::SteadyStateProgram<f64>;
pub type Cost = optprogram::Cost<f64>;
pub type KktPoint = optprogram::KktPoint<f64>;
pub type ControllerParams = augpdgd::ControllerParams<f64>;
pub type Trace = closedloop::Trace<f64>;
pub type FaultEvent = closedloop::FaultEvent<f64>;
pub type SimOptions = closedloop::SimOptions<f64>;
