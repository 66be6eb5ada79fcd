//! Long-document transformer toolkit.
//!
//! A desk-scale implementation of a Longformer-style pipeline: a
//! sliding-window + global sparse attention encoder, WordPiece tokenization,
//! 4,096-token corpus packing, MLM pre-training with three initialization
//! strategies (from scratch, BERT-checkpoint conversion, continual), a
//! multi-task fine-tuning harness with a learning-rate grid, the full
//! evaluation metric suite, and the attention-profile / error-rate-by-length
//! analyses. Everything is deterministic given a seed.

pub mod analysis;
pub mod checkpoint;
pub mod corpus;
pub mod datasets;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod attention;
pub mod par;
pub mod rng;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Parameter, Real, Tensor};
