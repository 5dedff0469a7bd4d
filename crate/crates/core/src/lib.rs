//! Causal subgraph extraction for out-of-distribution graph classification.
//!
//! An extractor GIN scores every edge, the top fraction of edges forms a
//! subgraph, and a predictor GIN classifies that subgraph. The extractor is
//! trained to keep the predictor accurate while maximizing the norm of the
//! pooled subgraph representation, since representation norms shrink as
//! inputs drift away from the training distribution.

pub mod engine;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod synth;
pub mod json;
pub mod probe;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
