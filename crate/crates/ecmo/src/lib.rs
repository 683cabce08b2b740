//! Pre-training a hierarchical encoder-decoder (HED) conversation model and
//! extracting two-level contextualized representations from its encoder:
//! a word-level vector per token (the bidirectional utterance-encoder state)
//! and a sentence-level vector per utterance (the context-encoder state).
//! The representations plug into a dual-encoder context-response matcher at
//! the input layer (word vectors) and the output layer (a bilinear score),
//! either frozen or trained further under the matching loss.
//!
//! Everything runs on a small f64 tape with reverse-mode differentiation;
//! no external ML framework is involved. See the `cli` module for the
//! end-to-end workflow (synthetic data, pre-train, fine-tune, extract,
//! match, evaluate).

pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod hed;
pub mod matcher;
pub mod metrics;
pub mod reps;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
