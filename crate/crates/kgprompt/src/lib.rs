//! Knowledge-graph-driven prompt learning for 3D mask presentation attack
//! detection.
//!
//! The crate builds class prompts from a curated knowledge graph, filters
//! them against visual features, trains the prompt parameters with a
//! two-term objective, and evaluates the resulting detector under standard
//! biometric protocols.

pub mod describe;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod filter;
pub mod fixtures;
pub mod kg;
pub mod manifest;
pub mod model;
pub mod objectives;
pub mod prompt;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
