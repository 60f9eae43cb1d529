//! Linear relational concepts.
//!
//! Estimate linear relational embeddings (LREs) from a model's subject to
//! object activation map, invert them with a low-rank pseudo-inverse into
//! unit-norm concept directions, and evaluate those directions as classifiers
//! and as causal activation edits.

pub mod baselines;
pub mod dataset;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod linalg;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod store;
pub mod synthworld;
pub mod toymodel;

pub use error::{Error, Result};
