//! Content-based retrieval of 3D volumes represented as ordered sequences of
//! per-slice embedding vectors.
//!
//! The pipeline: slice embeddings live in an [`store::EmbeddingStore`]; a
//! [`index::SliceIndex`] (exact or HNSW) finds the top-1 database slice for
//! each query slice; [`retrieval`] groups those hits into a hit table and
//! picks the volume with the most hits; [`rerank`] optionally re-scores the
//! candidate volumes by late interaction (sum of row-wise max cosine) and
//! localizes the query region in the winner; [`eval`] turns the results into
//! per-class recall and localization ratios.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod index;
pub mod labels;
pub mod rerank;
pub mod retrieval;
pub mod store;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
