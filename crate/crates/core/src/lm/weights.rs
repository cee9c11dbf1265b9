use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a tiny transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub context: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            d_model: 64,
            heads: 4,
            head_dim: 16,
            vocab_size: 512,
            context: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let ModelConfig {
            layers,
            d_model,
            heads,
            head_dim,
            vocab_size,
            context,
        } = *self;
        if layers == 0 || d_model == 0 || heads == 0 || vocab_size == 0 || context == 0 {
            return Err(Error::Constraint(
                "model dimensions must all be positive".into(),
            ));
        }
        if heads * head_dim != d_model {
            return Err(Error::Constraint(format!(
                "heads * head_dim = {} but d_model = {d_model}",
                heads * head_dim
            )));
        }
        Ok(())
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.d_model
    }
}

/// Row-major `rows x cols` matrix of f32 values, applied as `x · M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                left: data.len(),
                right: rows * cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `x · M`.
    pub fn left_mul(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(self.row(i)) {
                *o += xi * f64::from(m);
            }
        }
        out
    }

    /// `M · x`, i.e. the dot product of `x` with every row.
    pub fn right_mul(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| {
                self.row(r)
                    .iter()
                    .zip(x)
                    .map(|(&m, &xi)| f64::from(m) * xi)
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + Self::EPS).sqrt();
        x.iter()
            .zip(self.gamma.iter().zip(&self.beta))
            .map(|(v, (&g, &b))| (v - mean) * inv * f64::from(g) + f64::from(b))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2: LayerNorm,
    pub w1: Matrix,
    pub b1: Vec<f32>,
    pub w2: Matrix,
    pub b2: Vec<f32>,
}

/// All parameters of a pre-layer-norm decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// Token embedding `A`, `V x d_model`.
    pub embed: Matrix,
    /// Learned positions, `context x d_model`.
    pub pos: Matrix,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    /// Unembedding `U`, `V x d_model`.
    pub unembed: Matrix,
    pub unembed_bias: Vec<f32>,
}

impl ModelWeights {
    /// Checks every dimension against the config and that all entries are finite.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.d_model;
        let check = |name: &str, m: &Matrix, rows: usize, cols: usize| -> Result<()> {
            if m.rows != rows || m.cols != cols || m.data.len() != rows * cols {
                return Err(Error::Constraint(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    m.rows, m.cols
                )));
            }
            Ok(())
        };
        let check_vec = |name: &str, v: &[f32], len: usize| -> Result<()> {
            if v.len() != len {
                return Err(Error::Constraint(format!(
                    "{name} has length {}, expected {len}",
                    v.len()
                )));
            }
            Ok(())
        };
        check("embed", &self.embed, c.vocab_size, d)?;
        check("pos", &self.pos, c.context, d)?;
        check("unembed", &self.unembed, c.vocab_size, d)?;
        check_vec("unembed_bias", &self.unembed_bias, c.vocab_size)?;
        check_vec("ln_f.gamma", &self.ln_f.gamma, d)?;
        check_vec("ln_f.beta", &self.ln_f.beta, d)?;
        if self.blocks.len() != c.layers {
            return Err(Error::Constraint(format!(
                "{} blocks for {} layers",
                self.blocks.len(),
                c.layers
            )));
        }
        let ff = self.blocks.first().map_or(c.mlp_dim(), |b| b.w1.cols);
        for (l, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("layers.{l}.{s}");
            check_vec(&p("ln1.gamma"), &b.ln1.gamma, d)?;
            check_vec(&p("ln1.beta"), &b.ln1.beta, d)?;
            check_vec(&p("ln2.gamma"), &b.ln2.gamma, d)?;
            check_vec(&p("ln2.beta"), &b.ln2.beta, d)?;
            check(&p("attn.wq"), &b.wq, d, d)?;
            check(&p("attn.wk"), &b.wk, d, d)?;
            check(&p("attn.wv"), &b.wv, d, d)?;
            check(&p("attn.wo"), &b.wo, d, d)?;
            check(&p("mlp.w1"), &b.w1, d, ff)?;
            check_vec(&p("mlp.b1"), &b.b1, ff)?;
            check(&p("mlp.w2"), &b.w2, ff, d)?;
            check_vec(&p("mlp.b2"), &b.b2, d)?;
        }
        let finite = self.tensors().iter().all(|(_, _, data)| data.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::Constraint("non-finite weight".into()));
        }
        Ok(())
    }

    /// Named tensors in file order: `(name, dims, data)`.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mat = |m: &Matrix| vec![m.rows, m.cols];
        let mut out: Vec<(String, Vec<usize>, &[f32])> = vec![
            ("embed".into(), mat(&self.embed), &self.embed.data),
            ("pos".into(), mat(&self.pos), &self.pos.data),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.push((p("ln1.gamma"), vec![b.ln1.gamma.len()], &b.ln1.gamma));
            out.push((p("ln1.beta"), vec![b.ln1.beta.len()], &b.ln1.beta));
            out.push((p("attn.wq"), mat(&b.wq), &b.wq.data));
            out.push((p("attn.wk"), mat(&b.wk), &b.wk.data));
            out.push((p("attn.wv"), mat(&b.wv), &b.wv.data));
            out.push((p("attn.wo"), mat(&b.wo), &b.wo.data));
            out.push((p("ln2.gamma"), vec![b.ln2.gamma.len()], &b.ln2.gamma));
            out.push((p("ln2.beta"), vec![b.ln2.beta.len()], &b.ln2.beta));
            out.push((p("mlp.w1"), mat(&b.w1), &b.w1.data));
            out.push((p("mlp.b1"), vec![b.b1.len()], &b.b1));
            out.push((p("mlp.w2"), mat(&b.w2), &b.w2.data));
            out.push((p("mlp.b2"), vec![b.b2.len()], &b.b2));
        }
        out.push(("ln_f.gamma".into(), vec![self.ln_f.gamma.len()], &self.ln_f.gamma));
        out.push(("ln_f.beta".into(), vec![self.ln_f.beta.len()], &self.ln_f.beta));
        out.push(("unembed".into(), mat(&self.unembed), &self.unembed.data));
        out.push(("unembed_bias".into(), vec![self.unembed_bias.len()], &self.unembed_bias));
        out
    }

    /// Seeded random initialization. The unembedding starts tied to the
    /// embedding.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let ff = config.mlp_dim();
        let mut gaussian = |rows: usize, cols: usize, std: f64| -> Matrix {
            let normal = Normal::new(0.0, std).expect("positive std");
            let data = (0..rows * cols)
                .map(|_| normal.sample(&mut rng) as f32)
                .collect();
            Matrix { rows, cols, data }
        };
        let embed = gaussian(config.vocab_size, d, 1.0);
        let pos = gaussian(config.context, d, 0.1);
        let scale = 1.0 / (d as f64).sqrt();
        let blocks = (0..config.layers)
            .map(|_| Block {
                ln1: LayerNorm::identity(d),
                wq: gaussian(d, d, scale),
                wk: gaussian(d, d, scale),
                wv: gaussian(d, d, scale),
                wo: gaussian(d, d, scale),
                ln2: LayerNorm::identity(d),
                w1: gaussian(d, ff, scale),
                b1: vec![0.0; ff],
                w2: gaussian(ff, d, 1.0 / (ff as f64).sqrt()),
                b2: vec![0.0; d],
            })
            .collect();
        let weights = Self {
            config,
            unembed: embed.clone(),
            embed,
            pos,
            blocks,
            ln_f: LayerNorm::identity(d),
            unembed_bias: vec![0.0; config.vocab_size],
        };
        weights.validate()?;
        Ok(weights)
    }
}
