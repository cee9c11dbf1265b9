//! Token-level collaborative decoding between a pure-LM stream and a
//! retrieval-augmented stream.

use serde::{Deserialize, Serialize};

use crate::comparator::{decide, EmbeddingSpace, Verdict, Winner};
use crate::error::{Error, Result};
use crate::hmm::{predictive_retrieval, HmmWorld};
use crate::lm::{LanguageModel, LayerTrace, ModelWeights};
use crate::numerics::ProbVector;
use crate::probe::{attention_mass_series, dist_change_series, fusion_layer, matching_distribution};
use crate::retrieved::{RetrievedList, TokenId};

/// The model behind both streams.
#[derive(Debug, Clone, Copy)]
pub enum ModelHandle<'a> {
    Oracle(&'a HmmWorld),
    Tiny(&'a ModelWeights),
}

impl ModelHandle<'_> {
    pub fn vocab_size(&self) -> usize {
        match self {
            Self::Oracle(w) => w.vocab_size(),
            Self::Tiny(m) => m.config.vocab_size,
        }
    }
}

/// How the retrieval distribution `p_ir` is obtained on disagreement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PirStrategy {
    /// The oracle's exact retrieval predictive.
    Exact,
    /// Attention and embedding matching at the detected fusion layer.
    Matching { threshold: f64, freeze_l_star: bool },
    /// Reuse the pure-LM distribution.
    PureLm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub max_tokens: usize,
    pub stop_ids: Vec<TokenId>,
    pub strategy: PirStrategy,
    /// Evaluate the two streams concurrently within a step.
    pub parallel: bool,
    pub top_k: Option<usize>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            max_tokens: 16,
            stop_ids: Vec::new(),
            strategy: PirStrategy::Exact,
            parallel: false,
            top_k: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub token_llm: TokenId,
    pub token_rag: TokenId,
    pub chosen: TokenId,
    pub verdict: Option<Verdict>,
    pub l_star: Option<usize>,
    /// Set when no `p_ir` could be formed and the pure-LM token was taken.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDistributions {
    pub p_llm: ProbVector,
    pub p_rag: ProbVector,
    pub p_ir: Option<ProbVector>,
    pub l_star: Option<usize>,
}

struct StreamOutputs {
    p_llm: ProbVector,
    p_rag: ProbVector,
    traces: Option<(LayerTrace, LayerTrace)>,
}

pub struct DecodeSession<'a> {
    model: ModelHandle<'a>,
    retrieved: RetrievedList,
    prefix: Vec<TokenId>,
    prompt_len: usize,
    options: DecodeOptions,
    space: EmbeddingSpace,
    records: Vec<StepRecord>,
    frozen_l_star: Option<usize>,
    finished: bool,
}

impl<'a> DecodeSession<'a> {
    pub fn new(
        model: ModelHandle<'a>,
        retrieved: RetrievedList,
        prefix: Vec<TokenId>,
        options: DecodeOptions,
    ) -> Result<Self> {
        let space = match model {
            ModelHandle::Oracle(w) => EmbeddingSpace::Identity(w.vocab_size()),
            ModelHandle::Tiny(m) => EmbeddingSpace::from_model(m)?,
        };
        match (options.strategy, model) {
            (PirStrategy::Exact, ModelHandle::Tiny(_)) => {
                return Err(Error::InvalidInput(
                    "exact retrieval distribution needs the oracle model".into(),
                ))
            }
            (PirStrategy::Matching { .. }, ModelHandle::Oracle(_)) => {
                return Err(Error::InvalidInput(
                    "matching strategy needs a transformer model".into(),
                ))
            }
            _ => {}
        }
        Ok(Self {
            model,
            retrieved,
            prompt_len: prefix.len(),
            prefix,
            finished: options.max_tokens == 0,
            options,
            space,
            records: Vec::new(),
            frozen_l_star: None,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn prefix(&self) -> &[TokenId] {
        &self.prefix
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.prefix[self.prompt_len..]
    }

    /// Input to the pure-LM stream for the next step.
    pub fn llm_context(&self) -> Vec<TokenId> {
        self.prefix.clone()
    }

    /// Input to the retrieval-augmented stream for the next step.
    pub fn rag_context(&self) -> Vec<TokenId> {
        self.retrieved.rag_input(&self.prefix)
    }

    fn run_streams(&self) -> Result<StreamOutputs> {
        let llm_ctx = self.llm_context();
        let rag_ctx = self.rag_context();
        match self.model {
            ModelHandle::Oracle(w) => {
                let (a, b) = self.pair(|| w.next_distribution(&llm_ctx), || w.next_distribution(&rag_ctx));
                Ok(StreamOutputs {
                    p_llm: a?,
                    p_rag: b?,
                    traces: None,
                })
            }
            ModelHandle::Tiny(m) => {
                let (a, b) = self.pair(|| m.forward_trace(&llm_ctx), || m.forward_trace(&rag_ctx));
                let (a, b) = (a?, b?);
                Ok(StreamOutputs {
                    p_llm: a.final_logits.softmax(),
                    p_rag: b.final_logits.softmax(),
                    traces: Some((a, b)),
                })
            }
        }
    }

    fn pair<A: Send, B: Send>(
        &self,
        a: impl FnOnce() -> A + Send,
        b: impl FnOnce() -> B + Send,
    ) -> (A, B) {
        if self.options.parallel {
            rayon::join(a, b)
        } else {
            (a(), b())
        }
    }

    fn p_ir(&mut self, out: &StreamOutputs) -> Result<(ProbVector, Option<usize>)> {
        match (self.options.strategy, self.model) {
            (PirStrategy::Exact, ModelHandle::Oracle(w)) => Ok((predictive_retrieval(w, &self.prefix)?, None)),
            (PirStrategy::PureLm, _) => Ok((out.p_llm.clone(), None)),
            (PirStrategy::Matching { threshold, freeze_l_star }, ModelHandle::Tiny(m)) => {
                if self.retrieved.is_empty() {
                    return Err(Error::Detection("nothing retrieved".into()));
                }
                let (llm, rag) = out.traces.as_ref().expect("tiny model keeps traces");
                let span = self.retrieved.span();
                let l_star = match self.frozen_l_star {
                    Some(l) if freeze_l_star => l,
                    _ => {
                        let f = attention_mass_series(rag, span.clone())?;
                        let g = dist_change_series(rag, llm, m)?;
                        let l = fusion_layer(&f, &g, threshold)?.l_star.min(m.config.layers - 1);
                        if freeze_l_star {
                            self.frozen_l_star = Some(l);
                        }
                        l
                    }
                };
                let ids = self.rag_context();
                let p = matching_distribution(rag, m, &ids, span, l_star, Some(self.retrieved.delimiter()))?;
                Ok((p, Some(l_star)))
            }
            _ => Err(Error::InvalidInput("strategy does not match model".into())),
        }
    }

    /// The next-step distributions without advancing. `p_ir` is `None` when
    /// detection fails.
    pub fn distributions(&mut self) -> Result<StepDistributions> {
        let out = self.run_streams()?;
        let (p_ir, l_star) = match self.p_ir(&out) {
            Ok((p, l)) => (Some(p), l),
            Err(Error::Detection(_)) => (None, None),
            Err(e) => return Err(e),
        };
        Ok(StepDistributions {
            p_llm: out.p_llm,
            p_rag: out.p_rag,
            p_ir,
            l_star,
        })
    }

    /// One greedy step of both streams; the chosen token extends the shared
    /// prefix.
    pub fn step(&mut self) -> Result<StepRecord> {
        if self.finished {
            return Err(Error::InvalidInput("session already finished".into()));
        }
        let out = match self.run_streams() {
            Ok(o) => o,
            Err(e) => {
                self.finished = true;
                return Err(e);
            }
        };
        let token_llm = out.p_llm.argmax() as TokenId;
        let token_rag = out.p_rag.argmax() as TokenId;
        let mut record = StepRecord {
            step: self.records.len(),
            token_llm,
            token_rag,
            chosen: token_llm,
            verdict: None,
            l_star: None,
            fallback: false,
        };
        if token_llm != token_rag {
            match self.p_ir(&out) {
                Ok((p_ir, l_star)) => {
                    let v = decide(&out.p_rag, &out.p_llm, &p_ir, &self.space, self.options.top_k)?;
                    if v.winner == Winner::Benefit {
                        record.chosen = token_rag;
                    }
                    record.verdict = Some(v);
                    record.l_star = l_star;
                }
                Err(Error::Detection(_)) => record.fallback = true,
                Err(e) => return Err(e),
            }
        }
        self.prefix.push(record.chosen);
        self.records.push(record.clone());
        if self.records.len() >= self.options.max_tokens || self.options.stop_ids.contains(&record.chosen) {
            self.finished = true;
        }
        Ok(record)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    pub tokens: Vec<TokenId>,
    pub records: Vec<StepRecord>,
}

/// Steps until a stop id or the token limit.
pub fn decode_collab(session: &mut DecodeSession<'_>) -> Result<DecodeOutput> {
    while !session.is_finished() {
        session.step()?;
    }
    Ok(DecodeOutput {
        tokens: session.generated().to_vec(),
        records: session.records().to_vec(),
    })
}

/// Greedy decoding of `model` alone.
pub fn decode_pure<M: LanguageModel>(
    model: &M,
    prefix: &[TokenId],
    max_tokens: usize,
    stop_ids: &[TokenId],
) -> Result<Vec<TokenId>> {
    decode_rag(model, &RetrievedList::empty(0), prefix, max_tokens, stop_ids)
}

/// Greedy decoding with the retrieved list prepended.
pub fn decode_rag<M: LanguageModel>(
    model: &M,
    retrieved: &RetrievedList,
    prefix: &[TokenId],
    max_tokens: usize,
    stop_ids: &[TokenId],
) -> Result<Vec<TokenId>> {
    let mut ctx = prefix.to_vec();
    let mut out = Vec::new();
    while out.len() < max_tokens {
        let t = model.next_distribution(&retrieved.rag_input(&ctx))?.argmax() as TokenId;
        ctx.push(t);
        out.push(t);
        if stop_ids.contains(&t) {
            break;
        }
    }
    Ok(out)
}

/// One JSON object per line.
pub fn records_jsonl(records: &[StepRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::InvalidInput(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}
