//! Scenario runner: JSON configs in, trace CSV and report JSON out.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod run;

pub use config::{ConfigError, ScenarioConfig};
pub use run::{run_config, run_scenario, run_sweep, Report, RunError, RunOutput};
