//! Command-line pipeline around the `odefuse` forecaster: configuration,
//! run-folder artifacts and the prepare → select → train → evaluate flow,
//! plus ablation, explanation and hyperparameter search.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod synth;

pub use commands::Context;
pub use config::PipelineConfig;
pub use error::CliError;
