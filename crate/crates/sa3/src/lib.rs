//! File formats and the command-line driver around [`sa3_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod ppm;

pub use error::{Error, Result};
