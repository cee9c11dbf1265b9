//! Binary weight file: `TLM1`, six little-endian u32 header fields
//! (layers, d_model, heads, head_dim, vocab, context), named tensor
//! records, then a CRC-32 of everything before it.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lm::weights::{Block, LayerNorm, Matrix, ModelConfig, ModelWeights};

pub const MAGIC: &[u8; 4] = b"TLM1";

pub fn encode(weights: &ModelWeights) -> Result<Vec<u8>> {
    weights.validate()?;
    let c = &weights.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [c.layers, c.d_model, c.heads, c.head_dim, c.vocab_size, c.context] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for (name, dims, data) in weights.tensors() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in &dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for x in data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn save_weights(weights: &ModelWeights, path: &Path) -> Result<()> {
    let bytes = encode(weights)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct Record {
    offset: u64,
    dims: Vec<usize>,
    data: Vec<f32>,
}

struct Tensors {
    records: HashMap<String, Record>,
    end: u64,
}

impl Tensors {
    fn take(&mut self, name: &str, want: &[usize]) -> Result<Vec<f32>> {
        let r = self.records.remove(name).ok_or_else(|| Error::Format {
            offset: self.end,
            message: format!("missing tensor {name}"),
        })?;
        if r.dims != want {
            return Err(Error::Format {
                offset: r.offset,
                message: format!("tensor {name} has dims {:?}, expected {want:?}", r.dims),
            });
        }
        Ok(r.data)
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        Ok(Matrix {
            rows,
            cols,
            data: self.take(name, &[rows, cols])?,
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelWeights> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected TLM1".into(),
        });
    }
    if bytes.len() < 4 + 24 + 4 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: "truncated header".into(),
        });
    }
    let body_end = bytes.len() - 4;
    let mut cur = Cursor {
        buf: &bytes[..body_end],
        pos: 4,
    };
    let mut header = [0usize; 6];
    for h in header.iter_mut() {
        *h = cur.u32("header")? as usize;
    }
    let [layers, d_model, heads, head_dim, vocab_size, context] = header;
    let config = ModelConfig {
        layers,
        d_model,
        heads,
        head_dim,
        vocab_size,
        context,
    };
    config.validate().map_err(|e| Error::Format {
        offset: 4,
        message: format!("inconsistent header: {e}"),
    })?;

    let mut records: HashMap<String, Record> = HashMap::new();
    while cur.pos < body_end {
        let offset = cur.pos as u64;
        let name_len = cur.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format {
                offset,
                message: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = cur.u32("tensor rank")? as usize;
        if rank == 0 || rank > 2 {
            return Err(Error::Format {
                offset,
                message: format!("tensor {name} has unsupported rank {rank}"),
            });
        }
        let dims = (0..rank)
            .map(|_| cur.u32("tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| Error::Format {
                offset,
                message: format!("tensor {name} is too large"),
            })?;
        let raw = cur.take(count * 4, &format!("data of tensor {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if records
            .insert(name.clone(), Record { offset, dims, data })
            .is_some()
        {
            return Err(Error::Format {
                offset,
                message: format!("duplicate tensor {name}"),
            });
        }
    }

    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    if crc32fast::hash(&bytes[..body_end]) != stored {
        return Err(Error::Format {
            offset: body_end as u64,
            message: "checksum mismatch".into(),
        });
    }

    let d = d_model;
    let ff = records
        .get("layers.0.mlp.w1")
        .and_then(|r| r.dims.get(1).copied())
        .unwrap_or(4 * d);
    let mut t = Tensors {
        records,
        end: body_end as u64,
    };
    let embed = t.matrix("embed", vocab_size, d)?;
    let pos = t.matrix("pos", context, d)?;
    let unembed = t.matrix("unembed", vocab_size, d)?;
    let mut blocks = Vec::with_capacity(layers);
    for l in 0..layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        blocks.push(Block {
            ln1: LayerNorm {
                gamma: t.take(&p("ln1.gamma"), &[d])?,
                beta: t.take(&p("ln1.beta"), &[d])?,
            },
            wq: t.matrix(&p("attn.wq"), d, d)?,
            wk: t.matrix(&p("attn.wk"), d, d)?,
            wv: t.matrix(&p("attn.wv"), d, d)?,
            wo: t.matrix(&p("attn.wo"), d, d)?,
            ln2: LayerNorm {
                gamma: t.take(&p("ln2.gamma"), &[d])?,
                beta: t.take(&p("ln2.beta"), &[d])?,
            },
            w1: t.matrix(&p("mlp.w1"), d, ff)?,
            b1: t.take(&p("mlp.b1"), &[ff])?,
            w2: t.matrix(&p("mlp.w2"), ff, d)?,
            b2: t.take(&p("mlp.b2"), &[d])?,
        });
    }
    let ln_f = LayerNorm {
        gamma: t.take("ln_f.gamma", &[d])?,
        beta: t.take("ln_f.beta", &[d])?,
    };
    let unembed_bias = t.take("unembed_bias", &[vocab_size])?;
    if let Some((name, r)) = t.records.iter().min_by_key(|(_, r)| r.offset) {
        return Err(Error::Format {
            offset: r.offset,
            message: format!("unexpected tensor {name}"),
        });
    }
    let weights = ModelWeights {
        config,
        embed,
        pos,
        blocks,
        ln_f,
        unembed,
        unembed_bias,
    };
    weights.validate().map_err(|e| Error::Format {
        offset: 4,
        message: e.to_string(),
    })?;
    Ok(weights)
}
