//! Pixel-based fallback encoding for decoder-only language models.
//!
//! Words outside a language model's comfortable vocabulary are rendered as
//! grapheme-bigram pixel patches, encoded by a small transformer into one
//! vector per word, and fed to the LM as input embeddings next to ordinary
//! token embeddings.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod interleave;
pub mod lm;
pub mod nn;
pub mod rng;
pub mod textrender;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
