//! Command-line pipeline: world generation, warmup, prototype fitting, pseudo
//! labeling, transferability maps, self-training, evaluation and the studies built
//! on them.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use commands::{run, Cli, Command};
pub use config::PipelineConfig;
pub use error::{CliError, CliResult};
pub use pipeline::Pipeline;
