//! Slot filling as matching: phoneme posteriorgrams, trie span detection and a
//! speech-encoder / knowledge-encoder / bridge network that scores candidate
//! entities from a closed database.

pub mod error;
pub mod eval;
pub mod infer;
pub mod model;
pub mod neural;
pub mod phoneme;
pub mod synth;
pub mod training;
pub mod trie;

pub use error::{Error, Result};
