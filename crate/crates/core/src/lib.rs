//! Semantic user indexing for LLM-based sequential recommendation.
//!
//! Review histories are embedded, pooled per user with id-keyed attention,
//! and quantized by a residual-quantized autoencoder into short hierarchical
//! codeword tuples (`<a_12> <b_3> <c_200> <d_7>`). Those ids feed six
//! instruction-tuning corpora and a two-stage retrieve-then-rerank evaluation.

pub mod corpus;
pub mod embed;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod indexer;
pub mod linalg;
pub mod prompts;
pub mod rank;
pub mod rqvae;
pub mod synthetic;

pub use error::{Error, Result};
