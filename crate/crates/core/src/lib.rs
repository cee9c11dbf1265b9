//! Token-level benefit and detriment analysis for retrieval-augmented
//! generation, with a dual-stream collaborative decoder.

pub mod comparator;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod hmm;
pub mod lm;
pub mod numerics;
pub mod probe;
pub mod retrieved;
pub mod retriever;
pub mod stats;

pub use error::{Error, Result};
pub use lm::LanguageModel;
pub use numerics::{ProbVector, ScoreVector};
pub use retrieved::{RetrievedList, TokenId};
