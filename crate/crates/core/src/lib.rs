//! Minimal sufficient cores of step-segmented reasoning traces.
//!
//! A trace is an ordered list of steps produced on the way to an answer. The
//! crate asks which steps an answer actually depends on: it extracts small
//! subsets that still make a frozen oracle reproduce the full-trace answer,
//! scores every step by leave-one-out necessity, and compares the embedding
//! geometry of kept and removed steps.

pub mod answer;
pub mod error;
pub mod extraction;
pub mod geometry;
pub mod metrics;
pub mod oracle;
pub mod sufficiency;
pub mod synth;
pub mod trace;

pub use answer::{answers_match, canonicalize};
pub use error::{Error, Result};
pub use extraction::{CoreResult, Method};
pub use metrics::NecessityProfile;
pub use oracle::{CachedOracle, Oracle, OracleResponse, OracleSpec};
pub use sufficiency::{Judge, SufficiencyCriterion};
pub use trace::{Step, Subset, Trace};
