//! Batch runner for core extraction, necessity profiling, budget sweeps,
//! geometry, cross-oracle transfer and ablations over a trace corpus.

pub mod config;
pub mod corpus;
pub mod error;
pub mod ops;
pub mod report;

pub use config::{RunConfig, VERSION};
pub use error::{HarnessError, Result};
