//! Stage orchestration behind the `inrmark` binary.

pub mod config;
pub mod error;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use error::{PipelineError, Result};
