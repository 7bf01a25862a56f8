//! Multi-modal interest-aware sequential recommendation.
//!
//! Items carry frozen text and image feature vectors. Per-modality adapters
//! map them into a shared latent space; a density-peaks clustering of all item
//! tokens yields interest prototypes; a Transformer encoder reads each user's
//! interest tokens and a decoder, queried by the user's item tokens, produces
//! the sequence representation. Candidates are scored with a user-adaptive
//! fusion of their modality embeddings.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod interest;
pub mod matching;
pub mod model;
pub mod param;
pub mod pipeline;
pub mod rng;
pub mod store;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
