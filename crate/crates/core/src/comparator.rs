//! Cosine comparison of weighted-average embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::ModelWeights;
use crate::numerics::{cosine_similarity, ProbVector};

/// Token embedding rows, or the implicit identity (one-hot rows).
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingSpace {
    Identity(usize),
    Matrix(Vec<Vec<f64>>),
}

impl EmbeddingSpace {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || dim == 0 {
            return Err(Error::InvalidInput("empty embedding matrix".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Shape {
                    left: r.len(),
                    right: dim,
                });
            }
            if r.iter().all(|&x| x == 0.0) {
                return Err(Error::Degenerate(format!("embedding row {i} is all zero")));
            }
        }
        Ok(Self::Matrix(rows))
    }

    /// The input embedding `A` of a tiny model.
    pub fn from_model(weights: &ModelWeights) -> Result<Self> {
        let a = &weights.embed;
        Self::from_rows(
            (0..a.rows)
                .map(|r| a.row(r).iter().map(|&x| f64::from(x)).collect())
                .collect(),
        )
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Self::Identity(v) => *v,
            Self::Matrix(rows) => rows.len(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Identity(v) => *v,
            Self::Matrix(rows) => rows[0].len(),
        }
    }
}

/// `Σ p(t) · row(t)`, optionally restricted to the `top_k` most likely
/// tokens and renormalized.
pub fn weighted_embedding(dist: &ProbVector, space: &EmbeddingSpace, top_k: Option<usize>) -> Result<Vec<f64>> {
    if dist.len() != space.vocab_size() {
        return Err(Error::Shape {
            left: dist.len(),
            right: space.vocab_size(),
        });
    }
    let truncated;
    let p = match top_k {
        Some(k) => {
            truncated = dist.top_k(k)?;
            &truncated
        }
        None => dist,
    };
    match space {
        EmbeddingSpace::Identity(_) => Ok(p.as_slice().to_vec()),
        EmbeddingSpace::Matrix(rows) => {
            let mut out = vec![0.0; space.dim()];
            for (&w, row) in p.as_slice().iter().zip(rows) {
                if w == 0.0 {
                    continue;
                }
                for (o, x) in out.iter_mut().zip(row) {
                    *o += w * x;
                }
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    Benefit,
    Detriment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub cos_ir: f64,
    pub cos_llm: f64,
    pub winner: Winner,
    pub score: f64,
}

/// Benefit wins when `cos(w_rag, w_ir) ≥ cos(w_rag, w_llm)`.
pub fn decide(
    p_rag: &ProbVector,
    p_llm: &ProbVector,
    p_ir: &ProbVector,
    space: &EmbeddingSpace,
    top_k: Option<usize>,
) -> Result<Verdict> {
    let w_rag = weighted_embedding(p_rag, space, top_k)?;
    let w_llm = weighted_embedding(p_llm, space, top_k)?;
    let w_ir = weighted_embedding(p_ir, space, top_k)?;
    let cos_ir = cosine_similarity(&w_rag, &w_ir)?;
    let cos_llm = cosine_similarity(&w_rag, &w_llm)?;
    Ok(Verdict {
        cos_ir,
        cos_llm,
        winner: if cos_ir >= cos_llm {
            Winner::Benefit
        } else {
            Winner::Detriment
        },
        score: cos_ir - cos_llm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn embedding_examples() {
        let id = EmbeddingSpace::Identity(3);
        let p = pv(&[0.2, 0.3, 0.5]);
        assert_eq!(weighted_embedding(&p, &id, None).unwrap(), vec![0.2, 0.3, 0.5]);
        let space = EmbeddingSpace::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(weighted_embedding(&pv(&[0.25, 0.75]), &space, None).unwrap(), vec![0.25, 0.75]);
        let rows = EmbeddingSpace::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(weighted_embedding(&pv(&[0.0, 1.0]), &rows, None).unwrap(), vec![3.0, 4.0]);
        assert!(EmbeddingSpace::from_rows(vec![vec![0.0, 0.0]]).is_err());
        assert!(weighted_embedding(&pv(&[1.0]), &id, None).is_err());
    }

    #[test]
    fn decision_cases() {
        let id = EmbeddingSpace::Identity(3);
        let a = pv(&[0.6, 0.3, 0.1]);
        let b = pv(&[0.1, 0.2, 0.7]);
        let v = decide(&a, &b, &a, &id, None).unwrap();
        assert_eq!((v.cos_ir, v.winner), (1.0, Winner::Benefit));
        let v = decide(&a, &a, &b, &id, None).unwrap();
        assert_eq!(v.winner, Winner::Detriment);
        let v = decide(&a, &b, &b, &id, None).unwrap();
        assert_eq!((v.score, v.winner), (0.0, Winner::Benefit));
    }

    #[test]
    fn top_k_truncates() {
        let id = EmbeddingSpace::Identity(3);
        let w = weighted_embedding(&pv(&[0.5, 0.3, 0.2]), &id, Some(2)).unwrap();
        assert!((w[0] - 0.625).abs() < 1e-12 && w[2] == 0.0);
    }
}
