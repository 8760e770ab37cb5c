//! Cross-video contextual weakly supervised temporal action localization.

pub mod autograd;
pub mod cli;
pub mod config;
pub mod contrast;
pub mod embedder;
pub mod error;
pub mod evaluator;
pub mod gksa;
pub mod gradcheck;
pub mod heads;
pub mod ingest;
pub mod localizer;
pub mod memory;
pub mod model;
pub mod params;
pub mod pseudo;
pub mod report;
pub mod trainer;

pub use error::{Error, Result};
