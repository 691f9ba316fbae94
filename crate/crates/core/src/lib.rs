//! Cross-tokenizer knowledge distillation at desk scale.
//!
//! A frozen teacher and a trainable student, each a small decoder-only
//! transformer with its own tokenizer, are tied together by cross-model
//! attention projectors. The student is trained on a combination of
//! supervised cross-entropy, entropy-weighted dual-space KL distillation and
//! a banded Soft-DTW divergence over embeddings and final hidden states.

pub mod cma;
pub mod error;
pub mod numerics;
pub mod softdtw;
pub mod lm;
pub mod tokenizer;
pub mod train;
pub mod weighting;

pub use error::{Error, Result};
pub use numerics::{Rng, ValueGrid};
