pub mod archive;
pub mod attribution;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod target;

pub use error::{Error, ErrorCategory, Result};
