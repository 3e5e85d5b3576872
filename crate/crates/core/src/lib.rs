//! Target-oriented and context-aware transformer sarcasm classifiers.
//!
//! The crate covers the whole pipeline: JSON-lines conversation corpora
//! ([`corpus`]), a word-level tokenizer ([`tokenizer`]), input sequence
//! construction ([`sequence`]), a float64 reverse-mode tensor engine
//! ([`tensor`]), a post-norm transformer encoder ([`encoder`]), seeded
//! training ([`train`]) and evaluation / error analysis ([`eval`]).

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod par;
pub mod sequence;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
