//! Neural machine translation with lexical constraints treated as external
//! memories.
//!
//! The engine combines a from-scratch Transformer (64-bit floats, full
//! reverse-mode gradients) with two ways of consuming lexical constraints:
//!
//! - **soft**: constraints are encoded into a memory matrix (shallow
//!   embedding lookup or a deep encoder stack) and integrated into the
//!   decoder by a gate, a copy mechanism, or decoder self-attention, so a
//!   wrong constraint can be ignored or corrected;
//! - **hard**: grid beam search and dynamic beam allocation force every
//!   constraint into the output.
//!
//! Around the models sit the supporting pipelines: BPE subword
//! tokenization, vocabulary construction, an IBM Model 1 word-alignment
//! table, constraint generation for perfect / noisy / automatic scenarios,
//! corpus BLEU-4, and decoding-runtime measurement.

pub mod cmem;
pub mod config;
pub mod constraints;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
