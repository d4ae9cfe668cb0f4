//! Experiment driver: reads a flat key-value config, runs adaptive FEINN,
//! adaptive or uniform FEM, norm or seed studies, and writes CSV tables,
//! mesh and solution dumps and network checkpoints.

pub mod config;
pub mod run;

pub use config::{ConfigError, Mode, RunConfig};
pub use run::{run, RunError, RunSummary};
