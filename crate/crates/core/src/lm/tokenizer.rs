use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::retrieved::TokenId;

pub const DELIMITER: &str = "[Retrieved Passage]";
pub const UNK: &str = "<unk>";

/// Word-level vocabulary with a reserved delimiter and unknown token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerVocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    unk: TokenId,
    delimiter: TokenId,
}

impl TokenizerVocab {
    /// Ids follow list order. Both reserved tokens must be present.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidInput(format!("duplicate token {t:?}")));
            }
        }
        let find = |t: &str| {
            index
                .get(t)
                .copied()
                .ok_or_else(|| Error::InvalidInput(format!("vocabulary lacks {t:?}")))
        };
        let unk = find(UNK)?;
        let delimiter = find(DELIMITER)?;
        Ok(Self {
            tokens,
            index,
            unk,
            delimiter,
        })
    }

    /// `<unk>` and the delimiter, then the `max_size - 2` most frequent
    /// words (ties alphabetical).
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        if max_size < 2 {
            return Err(Error::InvalidInput(
                "vocabulary needs room for the reserved tokens".into(),
            ));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for piece in segment(text) {
                if let Piece::Word(w) = piece {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = vec![UNK.to_string(), DELIMITER.to_string()];
        tokens.extend(ranked.into_iter().take(max_size - 2).map(|(w, _)| w));
        Self::new(tokens)
    }

    /// One token per line; line number is the id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk(&self) -> TokenId {
        self.unk
    }

    pub fn delimiter(&self) -> TokenId {
        self.delimiter
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        segment(text)
            .into_iter()
            .map(|p| match p {
                Piece::Delimiter => self.delimiter,
                Piece::Word(w) => self.id(&w).unwrap_or(self.unk),
            })
            .collect()
    }

    /// Tokens joined by single spaces; unknown ids render as `<unk>`.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, PartialEq, Eq)]
enum Piece {
    Word(String),
    Delimiter,
}

/// Case-folded words (alphanumeric runs) and single punctuation marks; the
/// delimiter string is matched case-insensitively.
fn segment(text: &str) -> Vec<Piece> {
    let lower = text.to_lowercase();
    let delim = DELIMITER.to_lowercase();
    let mut out = Vec::new();
    for (i, chunk) in lower.split(delim.as_str()).enumerate() {
        if i > 0 {
            out.push(Piece::Delimiter);
        }
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() {
                word.push(ch);
                continue;
            }
            if !word.is_empty() {
                out.push(Piece::Word(std::mem::take(&mut word)));
            }
            if !ch.is_whitespace() {
                out.push(Piece::Word(ch.to_string()));
            }
        }
        if !word.is_empty() {
            out.push(Piece::Word(word));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> TokenizerVocab {
        TokenizerVocab::new(
            [UNK, DELIMITER, "paris", "is", "the", "capital", "."]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn basic_segmentation() {
        let v = vocab();
        assert_eq!(v.tokenize("Paris is"), vec![2, 3]);
        assert_eq!(v.tokenize("[Retrieved Passage]"), vec![v.delimiter()]);
        assert_eq!(v.tokenize("Lyon"), vec![v.unk()]);
        assert_eq!(v.tokenize("Paris.[Retrieved Passage]the"), vec![2, 6, 1, 4]);
    }

    #[test]
    fn round_trip_on_normalized_text() {
        let v = vocab();
        let text = "paris is the capital .";
        assert_eq!(v.detokenize(&v.tokenize(text)), text);
    }

    #[test]
    fn reserved_tokens_required() {
        assert!(TokenizerVocab::new(vec!["a".into()]).is_err());
        assert!(TokenizerVocab::new(vec![UNK.into(), DELIMITER.into(), UNK.into()]).is_err());
    }

    #[test]
    fn build_ranks_by_frequency() {
        let v = TokenizerVocab::build(["b a b", "c b a"], 4).unwrap();
        assert_eq!(v.tokens(), &[UNK, DELIMITER, "b", "a"]);
    }
}
