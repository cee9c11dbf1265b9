//! JSONL corpora and a persistent BM25 index.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::TokenizerVocab;
use crate::retrieved::RetrievedList;

pub const INDEX_MAGIC: &[u8; 4] = b"BMIX";
pub const INDEX_VERSION: u32 = 1;
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Deserialize)]
struct RawDocument {
    id: String,
    text: String,
}

/// Reads one JSON object per line; blank lines are skipped. Lines are
/// numbered from 1.
pub fn parse_corpus(text: &str) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDocument = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if raw.text.trim().is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty text".into(),
            });
        }
        if !seen.insert(raw.id.clone()) {
            return Err(Error::Conflict(format!(
                "duplicate document id {:?} on line {line_no}",
                raw.id
            )));
        }
        docs.push(Document {
            id: raw.id,
            text: raw.text,
        });
    }
    Ok(docs)
}

pub fn ingest(path: &Path) -> Result<Vec<Document>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

/// Lowercased alphanumeric runs; punctuation and whitespace separate terms.
pub fn index_terms(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub doc_id: String,
    pub score: f64,
}

/// Term postings over documents numbered in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    docs: Vec<Document>,
    doc_lengths: Vec<u32>,
    postings: BTreeMap<String, Vec<(u32, u32)>>,
    params: Bm25Params,
}

impl InvertedIndex {
    pub fn build(docs: Vec<Document>) -> Self {
        Self::with_params(docs, Bm25Params::default())
    }

    pub fn with_params(docs: Vec<Document>, params: Bm25Params) -> Self {
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(docs.len());
        for (n, doc) in docs.iter().enumerate() {
            let terms = index_terms(&doc.text);
            doc_lengths.push(terms.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            for (t, f) in tf {
                postings.entry(t).or_default().push((n as u32, f));
            }
        }
        Self {
            docs,
            doc_lengths,
            postings,
            params,
        }
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn doc(&self, id: &str) -> Option<&Document> {
        self.docs.iter().find(|d| d.id == id)
    }

    pub fn avg_doc_length(&self) -> f64 {
        if self.docs.is_empty() {
            return 0.0;
        }
        self.doc_lengths.iter().map(|&l| f64::from(l)).sum::<f64>() / self.docs.len() as f64
    }

    /// Term frequency of `term` in document `doc_id`.
    pub fn term_frequency(&self, term: &str, doc_id: &str) -> u32 {
        let Some(n) = self.docs.iter().position(|d| d.id == doc_id) else {
            return 0;
        };
        self.postings
            .get(term)
            .and_then(|p| p.iter().find(|(d, _)| *d as usize == n))
            .map_or(0, |&(_, f)| f)
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<u32> {
        self.docs
            .iter()
            .position(|d| d.id == doc_id)
            .map(|n| self.doc_lengths[n])
    }

    /// Top-`k` documents by BM25, ties broken by ascending document id.
    pub fn search(&self, query: &str, k: usize) -> Result<Vec<SearchHit>> {
        if k == 0 {
            return Err(Error::InvalidInput("k must be at least 1".into()));
        }
        if self.docs.is_empty() {
            return Ok(Vec::new());
        }
        let n = self.docs.len() as f64;
        let avg = self.avg_doc_length().max(f64::MIN_POSITIVE);
        let Bm25Params { k1, b } = self.params;
        let mut terms = index_terms(query);
        terms.sort();
        terms.dedup();
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for t in &terms {
            let Some(list) = self.postings.get(t) else {
                continue;
            };
            let df = list.len() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            for &(d, tf) in list {
                let tf = f64::from(tf);
                let len = f64::from(self.doc_lengths[d as usize]);
                let norm = tf + k1 * (1.0 - b + b * len / avg);
                *scores.entry(d).or_default() += idf * tf * (k1 + 1.0) / norm;
            }
        }
        let mut hits: Vec<SearchHit> = scores
            .into_iter()
            .map(|(d, score)| SearchHit {
                doc_id: self.docs[d as usize].id.clone(),
                score,
            })
            .collect();
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id)));
        hits.truncate(k);
        Ok(hits)
    }

    pub fn encode(&self) -> Vec<u8> {
        fn put_u32(out: &mut Vec<u8>, v: u32) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        fn put_str(out: &mut Vec<u8>, s: &str) {
            put_u32(out, s.len() as u32);
            out.extend_from_slice(s.as_bytes());
        }
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        put_u32(&mut out, INDEX_VERSION);
        out.extend_from_slice(&self.params.k1.to_le_bytes());
        out.extend_from_slice(&self.params.b.to_le_bytes());
        put_u32(&mut out, self.docs.len() as u32);
        for (doc, &len) in self.docs.iter().zip(&self.doc_lengths) {
            put_str(&mut out, &doc.id);
            put_str(&mut out, &doc.text);
            put_u32(&mut out, len);
        }
        put_u32(&mut out, self.postings.len() as u32);
        for (term, list) in &self.postings {
            put_str(&mut out, term);
            put_u32(&mut out, list.len() as u32);
            for &(d, tf) in list {
                put_u32(&mut out, d);
                put_u32(&mut out, tf);
            }
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != INDEX_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, expected BMIX".into(),
            });
        }
        if bytes.len() < 12 {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                message: "truncated header".into(),
            });
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
        let mut r = Reader {
            buf: &bytes[..body_end],
            pos: 4,
        };
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported index version {version}"),
            });
        }
        if crc32fast::hash(&bytes[..body_end]) != stored {
            return Err(Error::Format {
                offset: body_end as u64,
                message: "checksum mismatch".into(),
            });
        }
        let params = Bm25Params {
            k1: r.f64()?,
            b: r.f64()?,
        };
        let n_docs = r.u32()? as usize;
        let mut docs = Vec::new();
        let mut doc_lengths = Vec::new();
        for _ in 0..n_docs {
            let id = r.string()?;
            let text = r.string()?;
            docs.push(Document { id, text });
            doc_lengths.push(r.u32()?);
        }
        let n_terms = r.u32()? as usize;
        let mut postings = BTreeMap::new();
        for _ in 0..n_terms {
            let at = r.pos;
            let term = r.string()?;
            let count = r.u32()? as usize;
            let mut list = Vec::new();
            for _ in 0..count {
                let d = r.u32()?;
                if d as usize >= n_docs {
                    return Err(Error::Format {
                        offset: at as u64,
                        message: format!("posting for term {term:?} names document {d}"),
                    });
                }
                list.push((d, r.u32()?));
            }
            postings.insert(term, list);
        }
        if r.pos != body_end {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: "trailing bytes before checksum".into(),
            });
        }
        Ok(Self {
            docs,
            doc_lengths,
            postings,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: "truncated index".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Format {
            offset: at as u64,
            message: "string is not UTF-8".into(),
        })
    }
}

/// Tokenized passages, in the given order, joined by the delimiter id.
pub fn assemble_retrieved_list(docs: &[Document], vocab: &TokenizerVocab) -> Result<RetrievedList> {
    let passages = docs
        .iter()
        .map(|d| {
            vocab
                .tokenize(&d.text)
                .into_iter()
                .filter(|&t| t != vocab.delimiter())
                .collect()
        })
        .collect();
    RetrievedList::new(passages, vocab.delimiter())
}
