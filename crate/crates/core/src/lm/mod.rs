//! Language models: the shared trait and a tiny introspectable transformer.

mod format;
mod forward;
mod tokenizer;
mod weights;

pub use format::{decode, encode, load_weights, save_weights, MAGIC};
pub use forward::LayerTrace;
pub use tokenizer::{TokenizerVocab, DELIMITER, UNK};
pub use weights::{Block, LayerNorm, Matrix, ModelConfig, ModelWeights};

use crate::error::Result;
use crate::numerics::ProbVector;
use crate::retrieved::TokenId;

/// Anything that maps a context to a next-token distribution.
///
/// The retrieval-augmented stream is the same model applied to
/// [`RetrievedList::rag_input`](crate::retrieved::RetrievedList::rag_input).
pub trait LanguageModel: Sync {
    fn vocab_size(&self) -> usize;

    fn next_distribution(&self, context: &[TokenId]) -> Result<ProbVector>;
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<ProbVector> {
        (**self).next_distribution(context)
    }
}
