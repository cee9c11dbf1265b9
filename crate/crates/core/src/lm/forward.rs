use crate::error::{Error, Result};
use crate::lm::weights::{Block, ModelWeights};
use crate::lm::LanguageModel;
use crate::numerics::{log_softmax, softmax_unchecked, ProbVector, ScoreVector};
use crate::retrieved::TokenId;

/// Everything one forward pass exposes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// `[L + 1][T][d_model]`: the embedding output, then each block output.
    pub hidden: Vec<Vec<Vec<f64>>>,
    /// `[L][H][T][T]` post-softmax weights; masked entries are zero.
    pub attention: Vec<Vec<Vec<Vec<f64>>>>,
    /// Logits at the last position.
    pub final_logits: ScoreVector,
}

impl LayerTrace {
    pub fn len(&self) -> usize {
        self.hidden.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layers(&self) -> usize {
        self.attention.len()
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn add_bias(mut v: Vec<f64>, b: &[f32]) -> Vec<f64> {
    for (x, &bi) in v.iter_mut().zip(b) {
        *x += f64::from(bi);
    }
    v
}

struct Projections {
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

fn project(block: &Block, xs: &[Vec<f64>]) -> Projections {
    let normed: Vec<Vec<f64>> = xs.iter().map(|x| block.ln1.apply(x)).collect();
    Projections {
        q: normed.iter().map(|a| block.wq.left_mul(a)).collect(),
        k: normed.iter().map(|a| block.wk.left_mul(a)).collect(),
        v: normed.iter().map(|a| block.wv.left_mul(a)).collect(),
    }
}

fn head_score(q: &[f64], k: &[f64], h: usize, dk: usize) -> f64 {
    let r = h * dk..(h + 1) * dk;
    q[r.clone()].iter().zip(&k[r]).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt()
}

impl ModelWeights {
    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::InvalidInput("empty input".into()));
        }
        if ids.len() > self.config.context {
            return Err(Error::Capacity(format!(
                "{} tokens exceed the context limit of {}",
                ids.len(),
                self.config.context
            )));
        }
        if let Some(t) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token {t} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Full forward pass with causal masking.
    pub fn forward_trace(&self, ids: &[TokenId]) -> Result<LayerTrace> {
        self.check_ids(ids)?;
        let c = &self.config;
        let t_len = ids.len();
        let mut x: Vec<Vec<f64>> = ids
            .iter()
            .enumerate()
            .map(|(t, &id)| {
                self.embed
                    .row(id as usize)
                    .iter()
                    .zip(self.pos.row(t))
                    .map(|(&e, &p)| f64::from(e) + f64::from(p))
                    .collect()
            })
            .collect();
        let mut hidden = Vec::with_capacity(c.layers + 1);
        let mut attention = Vec::with_capacity(c.layers);
        hidden.push(x.clone());
        for block in &self.blocks {
            let p = project(block, &x);
            let mut heads = vec![vec![vec![0.0; t_len]; t_len]; c.heads];
            let mut mixed = vec![vec![0.0; c.d_model]; t_len];
            for (h, head) in heads.iter_mut().enumerate() {
                let r = h * c.head_dim..(h + 1) * c.head_dim;
                for i in 0..t_len {
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| head_score(&p.q[i], &p.k[j], h, c.head_dim))
                        .collect();
                    let weights = softmax_unchecked(&scores);
                    for (j, &w) in weights.iter().enumerate() {
                        head[i][j] = w;
                        for (m, &v) in mixed[i][r.clone()].iter_mut().zip(&p.v[j][r.clone()]) {
                            *m += w * v;
                        }
                    }
                }
            }
            for (xi, mi) in x.iter_mut().zip(&mixed) {
                for (a, o) in xi.iter_mut().zip(block.wo.left_mul(mi)) {
                    *a += o;
                }
                let m = block.ln2.apply(xi);
                let inner: Vec<f64> = add_bias(block.w1.left_mul(&m), &block.b1)
                    .into_iter()
                    .map(gelu)
                    .collect();
                let out = add_bias(block.w2.left_mul(&inner), &block.b2);
                for (a, o) in xi.iter_mut().zip(out) {
                    *a += o;
                }
            }
            attention.push(heads);
            hidden.push(x.clone());
        }
        let last = &hidden[c.layers][t_len - 1];
        let final_logits = ScoreVector::new(self.lens_logits(last)?)?;
        Ok(LayerTrace {
            hidden,
            attention,
            final_logits,
        })
    }

    fn lens_logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.config.d_model {
            return Err(Error::Shape {
                left: h.len(),
                right: self.config.d_model,
            });
        }
        let normed = self.ln_f.apply(h);
        Ok(add_bias(self.unembed.right_mul(&normed), &self.unembed_bias))
    }

    /// Word distribution read off a residual-stream state: final layer norm,
    /// unembedding, softmax.
    pub fn logit_lens(&self, hidden: &[f64]) -> Result<ProbVector> {
        let logits = self.lens_logits(hidden)?;
        ScoreVector::new(logits).map(|s| s.softmax())
    }

    /// Log-probabilities of [`ModelWeights::logit_lens`].
    pub fn logit_lens_log(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        log_softmax(&self.lens_logits(hidden)?)
    }

    /// Raw scaled query-key scores of block `layer` from `query` to each of
    /// `keys`, per head: `[H][keys.len()]`. `states` are the block inputs.
    pub fn query_key_scores(
        &self,
        layer: usize,
        states: &[Vec<f64>],
        query: usize,
        keys: std::ops::Range<usize>,
    ) -> Result<Vec<Vec<f64>>> {
        let block = self
            .blocks
            .get(layer)
            .ok_or_else(|| Error::Range(format!("layer {layer} outside 0..{}", self.blocks.len())))?;
        if query >= states.len() || keys.end > states.len() {
            return Err(Error::Range(format!(
                "positions outside 0..{}",
                states.len()
            )));
        }
        let c = &self.config;
        let q = block.wq.left_mul(&block.ln1.apply(&states[query]));
        let ks: Vec<Vec<f64>> = keys
            .map(|j| block.wk.left_mul(&block.ln1.apply(&states[j])))
            .collect();
        Ok((0..c.heads)
            .map(|h| ks.iter().map(|k| head_score(&q, k, h, c.head_dim)).collect())
            .collect())
    }
}

impl LanguageModel for ModelWeights {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<ProbVector> {
        Ok(self.forward_trace(context)?.final_logits.softmax())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::weights::ModelConfig;
    use crate::numerics::js_divergence;

    fn model() -> ModelWeights {
        ModelWeights::random(
            ModelConfig {
                layers: 3,
                d_model: 8,
                heads: 2,
                head_dim: 4,
                vocab_size: 13,
                context: 10,
            },
            9,
        )
        .unwrap()
    }

    #[test]
    fn single_token_attention_is_one() {
        let tr = model().forward_trace(&[4]).unwrap();
        for layer in &tr.attention {
            for head in layer {
                assert_eq!(head, &vec![vec![1.0]]);
            }
        }
        assert_eq!(tr.hidden.len(), 4);
    }

    #[test]
    fn attention_rows_normalized_and_causal() {
        let tr = model().forward_trace(&[1, 5, 2, 7, 7]).unwrap();
        for layer in &tr.attention {
            for head in layer {
                for (i, row) in head.iter().enumerate() {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    assert!(row[i + 1..].iter().all(|&w| w == 0.0));
                }
            }
        }
    }

    #[test]
    fn final_lens_matches_output() {
        let m = model();
        let tr = m.forward_trace(&[3, 1, 4, 1, 5]).unwrap();
        let lens = m.logit_lens(&tr.hidden[3][4]).unwrap();
        let out = m.next_distribution(&[3, 1, 4, 1, 5]).unwrap();
        for (a, b) in lens.as_slice().iter().zip(out.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(lens.argmax(), tr.final_logits.softmax().argmax());
    }

    #[test]
    fn zero_vector_lens_is_normalized() {
        let m = model();
        let p = m.logit_lens(&[0.0; 8]).unwrap();
        assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let h = vec![0.3; 8];
        let a = m.logit_lens(&h).unwrap();
        assert_eq!(js_divergence(&a, &a).unwrap(), 0.0);
        assert!(matches!(m.logit_lens(&[0.0; 3]), Err(Error::Shape { .. })));
    }

    #[test]
    fn context_overflow_and_bad_ids() {
        let m = model();
        assert!(matches!(m.forward_trace(&[0; 11]), Err(Error::Capacity(_))));
        assert!(matches!(m.forward_trace(&[13]), Err(Error::InvalidInput(_))));
        assert!(matches!(m.forward_trace(&[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn query_key_scores_reproduce_attention() {
        let m = model();
        let ids = [2, 9, 4, 4];
        let tr = m.forward_trace(&ids).unwrap();
        let scores = m.query_key_scores(1, &tr.hidden[1], 3, 0..4).unwrap();
        for (h, s) in scores.iter().enumerate() {
            let w = softmax_unchecked(s);
            for j in 0..4 {
                assert!((w[j] - tr.attention[1][h][3][j]).abs() < 1e-12);
            }
        }
    }
}
