use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Retrieved passages joined by a delimiter token.
///
/// The flattened form is `p1 d p2 d ... pn`; no passage contains `d`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievedList {
    passages: Vec<Vec<TokenId>>,
    delimiter: TokenId,
}

impl RetrievedList {
    pub fn new(passages: Vec<Vec<TokenId>>, delimiter: TokenId) -> Result<Self> {
        for (i, p) in passages.iter().enumerate() {
            if p.contains(&delimiter) {
                return Err(Error::InvalidInput(format!(
                    "passage {i} contains the delimiter token {delimiter}"
                )));
            }
        }
        Ok(Self {
            passages,
            delimiter,
        })
    }

    pub fn empty(delimiter: TokenId) -> Self {
        Self {
            passages: Vec::new(),
            delimiter,
        }
    }

    pub fn passages(&self) -> &[Vec<TokenId>] {
        &self.passages
    }

    pub fn delimiter(&self) -> TokenId {
        self.delimiter
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn flattened(&self) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.passages.iter().map(|p| p.len() + 1).sum());
        for (i, p) in self.passages.iter().enumerate() {
            if i > 0 {
                out.push(self.delimiter);
            }
            out.extend_from_slice(p);
        }
        out
    }

    /// Model input for the retrieval-augmented stream: `flattened ⊕ d ⊕ prefix`,
    /// or just `prefix` when nothing was retrieved.
    pub fn rag_input(&self, prefix: &[TokenId]) -> Vec<TokenId> {
        if self.is_empty() {
            return prefix.to_vec();
        }
        let mut out = self.flattened();
        out.push(self.delimiter);
        out.extend_from_slice(prefix);
        out
    }

    /// Positions of the flattened list inside [`RetrievedList::rag_input`].
    pub fn span(&self) -> std::ops::Range<usize> {
        0..self.flattened_len()
    }

    pub fn flattened_len(&self) -> usize {
        let tokens: usize = self.passages.iter().map(Vec::len).sum();
        tokens + self.passages.len().saturating_sub(1)
    }
}
