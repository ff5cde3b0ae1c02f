//! Experiment driver for the cascaded diffusion planner: evaluation,
//! ablations, reports, plots and the `cdp` command line.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod plots;
pub mod report;

pub use error::{HarnessError, Result};
