//! Retrieval-based positive-example augmentation for imbalanced
//! sentence-selection QA.
//!
//! The pipeline trains dense bi-encoder retrievers on the positive
//! pairs of a small labeled QA dataset, retrieves top-k candidate
//! sentences per training query from a large unlabeled corpus, filters
//! the candidates with per-encoder pairwise oracles, unions the
//! filtered sets across encoders, and trains a final relevance
//! classifier on the augmented corpus.
//!
//! The numeric core is generic over the scalar type (see [`real::Real`]);
//! [`Scalar`] is the concrete alias the pipeline and CLI run with.

pub mod classifier;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod hash;
pub mod index;
pub mod io;
pub mod linalg;
pub mod pipeline;
pub mod real;
pub mod synthetic;

pub use error::{Error, Result};
pub use real::Real;

/// Scalar type the shipped pipeline runs with. Weights persist as f32
/// in the binary formats regardless of this choice.
pub type Scalar = f64;
