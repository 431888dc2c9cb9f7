//! Command-line surface, checkpoint persistence, and report emission for
//! the latent counterfactual pipeline.

pub mod checkpoint;
mod commands;
pub mod config;
mod error;
pub mod pgm;

pub use commands::run;
pub use error::{CliError, Result};
