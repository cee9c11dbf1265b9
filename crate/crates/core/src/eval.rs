//! Benefit/detriment classification: dataset construction by truncation,
//! scoring methods, and AUC/F1.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comparator::{decide, EmbeddingSpace};
use crate::decoder::{DecodeOptions, DecodeSession, ModelHandle, PirStrategy};
use crate::error::{Error, Result};
use crate::hmm::{sample_passages, sample_world, HmmWorld, WorldConfig};
use crate::numerics::{l1_distance, ProbVector};
use crate::retrieved::{RetrievedList, TokenId};
use crate::stats::auc;

pub const DEFAULT_TRUNCATION_CAP: usize = 8;

/// A sentence together with what was retrieved for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub retrieved: RetrievedList,
    pub sentence: Vec<TokenId>,
}

/// A truncation point where exactly one stream predicts the gold token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BdSample {
    pub sentence: usize,
    pub position: usize,
    pub prefix: Vec<TokenId>,
    pub gold: TokenId,
    pub token_llm: TokenId,
    pub token_rag: TokenId,
    /// 1 when the retrieval-augmented stream is the correct one.
    pub label: u8,
    #[serde(skip)]
    pub p_llm: Option<ProbVector>,
    #[serde(skip)]
    pub p_rag: Option<ProbVector>,
}

/// Label rule: 1 if only RAG is right, 0 if only the pure LM is right.
pub fn label_for(gold: TokenId, token_llm: TokenId, token_rag: TokenId) -> Option<u8> {
    match (token_llm == gold, token_rag == gold) {
        (false, true) => Some(1),
        (true, false) => Some(0),
        _ => None,
    }
}

fn truncation_points(len: usize, cap: Option<usize>, seed: u64) -> Vec<usize> {
    let all: Vec<usize> = (1..len).collect();
    match cap {
        Some(c) if all.len() > c => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<usize> = sample_indices(&mut rng, all.len(), c)
                .into_iter()
                .map(|i| all[i])
                .collect();
            picked.sort_unstable();
            picked
        }
        _ => all,
    }
}

fn stream_pair(model: ModelHandle<'_>, retrieved: &RetrievedList, prefix: &[TokenId]) -> Result<(ProbVector, ProbVector)> {
    use crate::lm::LanguageModel;
    match model {
        ModelHandle::Oracle(w) => Ok((
            w.next_distribution(prefix)?,
            w.next_distribution(&retrieved.rag_input(prefix))?,
        )),
        ModelHandle::Tiny(m) => Ok((
            m.next_distribution(prefix)?,
            m.next_distribution(&retrieved.rag_input(prefix))?,
        )),
    }
}

/// Tries truncation points of every sentence (at most `cap` per sentence,
/// chosen with `seed`) and keeps those satisfying the label rule.
pub fn build_dataset(
    model: ModelHandle<'_>,
    items: &[EvalItem],
    cap: Option<usize>,
    seed: u64,
) -> Result<Vec<BdSample>> {
    if let Some((i, _)) = items.iter().enumerate().find(|(_, it)| it.sentence.len() < 2) {
        return Err(Error::InvalidInput(format!(
            "sentence {i} has fewer than two tokens"
        )));
    }
    let per_sentence: Vec<Vec<BdSample>> = items
        .par_iter()
        .enumerate()
        .map(|(s, item)| {
            let mut out = Vec::new();
            let points = truncation_points(item.sentence.len(), cap, seed.wrapping_add(s as u64));
            for i in points {
                let prefix = &item.sentence[..i];
                let gold = item.sentence[i];
                let (p_llm, p_rag) = stream_pair(model, &item.retrieved, prefix)?;
                let a = p_llm.argmax() as TokenId;
                let b = p_rag.argmax() as TokenId;
                let Some(label) = label_for(gold, a, b) else {
                    continue;
                };
                debug_assert!(a != b);
                out.push(BdSample {
                    sentence: s,
                    position: i,
                    prefix: prefix.to_vec(),
                    gold,
                    token_llm: a,
                    token_rag: b,
                    label,
                    p_llm: Some(p_llm),
                    p_rag: Some(p_rag),
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_sentence.into_iter().flatten().collect())
}

/// `cos(w_rag, w_ir) − cos(w_rag, w_llm)`; non-negative means benefit.
pub fn score_tokrag(
    p_rag: &ProbVector,
    p_llm: &ProbVector,
    p_ir: &ProbVector,
    space: &EmbeddingSpace,
    top_k: Option<usize>,
) -> Result<f64> {
    Ok(decide(p_rag, p_llm, p_ir, space, top_k)?.score)
}

/// `ln p_rag(b) − ln p_llm(a)` for the two greedy tokens.
pub fn score_logprobs(p_rag: &ProbVector, p_llm: &ProbVector, token_llm: TokenId, token_rag: TokenId) -> f64 {
    p_rag.get(token_rag as usize).ln() - p_llm.get(token_llm as usize).ln()
}

/// `H(p_llm) − H(p_rag)` in nats.
pub fn score_entropy(p_rag: &ProbVector, p_llm: &ProbVector) -> f64 {
    p_llm.entropy() - p_rag.entropy()
}

fn consistency(p: &ProbVector, runs: usize, temperature: f64, rng: &mut ChaCha8Rng) -> f64 {
    let greedy = p.argmax();
    let logs: Vec<f64> = p.as_slice().iter().map(|x| x.ln() / temperature).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut hits = 0;
    for _ in 0..runs {
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = greedy;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        if pick == greedy {
            hits += 1;
        }
    }
    hits as f64 / runs as f64
}

/// Frequency of each stream's greedy token among `runs` tempered samples;
/// RAG consistency minus pure-LM consistency.
pub fn score_lexical_consistency(
    p_rag: &ProbVector,
    p_llm: &ProbVector,
    runs: usize,
    temperature: f64,
    seed: u64,
) -> Result<f64> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidInput(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if runs < 2 {
        return Err(Error::InvalidInput("need at least two runs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rag = consistency(p_rag, runs, temperature, &mut rng);
    let llm = consistency(p_llm, runs, temperature, &mut rng);
    Ok(rag - llm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub auc: f64,
    pub f1: f64,
    pub n_samples: usize,
    pub skipped: usize,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

/// F1 with `score ≥ 0` predicted positive.
pub fn f1_at_zero(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= 0.0, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

pub fn compute_metrics(method: &str, scores: Vec<f64>, labels: Vec<u8>) -> Result<EvalReport> {
    let a = auc(&scores, &labels)?;
    Ok(EvalReport {
        method: method.to_string(),
        auc: a,
        f1: f1_at_zero(&scores, &labels),
        n_samples: scores.len(),
        skipped: 0,
        scores,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Tokrag,
    Logprobs,
    Entropy,
    Consistency,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Tokrag, Method::Logprobs, Method::Entropy, Method::Consistency];

    pub fn name(self) -> &'static str {
        match self {
            Method::Tokrag => "tokrag",
            Method::Logprobs => "logprobs",
            Method::Entropy => "entropy",
            Method::Consistency => "consistency",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown method {name:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringOptions {
    pub strategy: PirStrategy,
    pub top_k: Option<usize>,
    pub consistency_runs: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        Self {
            strategy: PirStrategy::Exact,
            top_k: None,
            consistency_runs: 10,
            temperature: 1.0,
            seed: 0,
        }
    }
}

/// The retrieval distribution for a sample, or `None` if detection failed.
pub fn sample_p_ir(
    model: ModelHandle<'_>,
    retrieved: &RetrievedList,
    sample: &BdSample,
    strategy: PirStrategy,
) -> Result<Option<ProbVector>> {
    let opts = DecodeOptions {
        max_tokens: 1,
        strategy,
        ..DecodeOptions::default()
    };
    let mut session = DecodeSession::new(model, retrieved.clone(), sample.prefix.clone(), opts)?;
    Ok(session.distributions()?.p_ir)
}

/// Scores and labels of the samples that could be scored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub skipped: usize,
}

impl ScoredSet {
    pub fn extend(&mut self, other: ScoredSet) {
        self.scores.extend(other.scores);
        self.labels.extend(other.labels);
        self.skipped += other.skipped;
    }

    pub fn into_report(self, method: Method) -> Result<EvalReport> {
        let mut report = compute_metrics(method.name(), self.scores, self.labels)?;
        report.skipped = self.skipped;
        Ok(report)
    }
}

/// Scores every sample with `method`. Collaborative-score samples whose retrieval
/// distribution cannot be detected are skipped and counted.
pub fn score_set(
    model: ModelHandle<'_>,
    items: &[EvalItem],
    samples: &[BdSample],
    method: Method,
    options: &ScoringOptions,
) -> Result<ScoredSet> {
    let space = match model {
        ModelHandle::Oracle(w) => EmbeddingSpace::Identity(w.vocab_size()),
        ModelHandle::Tiny(m) => EmbeddingSpace::from_model(m)?,
    };
    let scored: Vec<Option<(f64, u8)>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let retrieved = &items[s.sentence].retrieved;
            let (p_llm, p_rag) = match (&s.p_llm, &s.p_rag) {
                (Some(a), Some(b)) => (a.clone(), b.clone()),
                _ => stream_pair(model, retrieved, &s.prefix)?,
            };
            let score = match method {
                Method::Tokrag => match sample_p_ir(model, retrieved, s, options.strategy)? {
                    Some(p_ir) => score_tokrag(&p_rag, &p_llm, &p_ir, &space, options.top_k)?,
                    None => return Ok(None),
                },
                Method::Logprobs => score_logprobs(&p_rag, &p_llm, s.token_llm, s.token_rag),
                Method::Entropy => score_entropy(&p_rag, &p_llm),
                Method::Consistency => score_lexical_consistency(
                    &p_rag,
                    &p_llm,
                    options.consistency_runs,
                    options.temperature,
                    options.seed.wrapping_add((s.sentence as u64) << 32 | i as u64),
                )?,
            };
            Ok(Some((score, s.label)))
        })
        .collect::<Result<_>>()?;
    let skipped = scored.iter().filter(|s| s.is_none()).count();
    let (scores, labels) = scored.into_iter().flatten().unzip();
    Ok(ScoredSet { scores, labels, skipped })
}

pub fn score_samples(
    model: ModelHandle<'_>,
    items: &[EvalItem],
    samples: &[BdSample],
    method: Method,
    options: &ScoringOptions,
) -> Result<EvalReport> {
    score_set(model, items, samples, method, options)?.into_report(method)
}

/// CSV `sample_id,score,label`.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("sample_id,score,label\n");
    for (i, (s, l)) in report.scores.iter().zip(&report.labels).enumerate() {
        out.push_str(&format!("{i},{s},{l}\n"));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleSuiteConfig {
    pub world: WorldConfig,
    pub sentences: usize,
    pub qualities: Vec<f64>,
    pub sentence_length: usize,
    pub passages: usize,
    pub passage_length: usize,
    pub seed: u64,
}

impl Default for OracleSuiteConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig {
                concept_count: 2,
                ..WorldConfig::default()
            },
            sentences: 100,
            qualities: vec![0.2, 0.8],
            sentence_length: 16,
            passages: 4,
            passage_length: 3,
            seed: 10_000,
        }
    }
}

/// One oracle world per sentence; the sentence is drawn from z*.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleCase {
    pub world: HmmWorld,
    pub item: EvalItem,
}

/// Sentence `i` uses quality `qualities[i % len]` and a world seeded with
/// `seed + i`.
pub fn oracle_suite(config: &OracleSuiteConfig) -> Result<Vec<OracleCase>> {
    if config.qualities.is_empty() {
        return Err(Error::InvalidInput("no retrieval qualities".into()));
    }
    (0..config.sentences)
        .map(|i| {
            let q = config.qualities[i % config.qualities.len()];
            let seed = config.seed.wrapping_add(i as u64);
            let world = sample_world(&config.world.with_quality(q), seed)?;
            let retrieved = sample_passages(&world, config.passages, config.passage_length, seed ^ 0x5eed)?;
            let sentence = world.sample_sequence(world.star_index(), config.sentence_length, seed ^ 0x7e47)?;
            Ok(OracleCase {
                world,
                item: EvalItem { retrieved, sentence },
            })
        })
        .collect()
}

/// A labelled oracle sample with the exact rule alongside the score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleScored {
    pub label: u8,
    pub score: f64,
    /// `1/D ≥ 1/M` with both floored at 1e-9.
    pub rule_benefit: bool,
}

/// The collaborative score with exact `p_ir` and identity embeddings over
/// the suite.
pub fn score_oracle_suite(cases: &[OracleCase], cap: Option<usize>, seed: u64) -> Result<Vec<OracleScored>> {
    let per_case: Vec<Vec<OracleScored>> = cases
        .par_iter()
        .enumerate()
        .map(|(i, case)| {
            let model = ModelHandle::Oracle(&case.world);
            let items = std::slice::from_ref(&case.item);
            let samples = build_dataset(model, items, cap, seed.wrapping_add(i as u64))?;
            let space = EmbeddingSpace::Identity(case.world.vocab_size());
            samples
                .iter()
                .map(|s| {
                    let p_llm = s.p_llm.as_ref().expect("oracle samples keep distributions");
                    let p_rag = s.p_rag.as_ref().expect("oracle samples keep distributions");
                    let p_ir = crate::hmm::predictive_retrieval(&case.world, &s.prefix)?;
                    let score = score_tokrag(p_rag, p_llm, &p_ir, &space, None)?;
                    let d = l1_distance(p_rag, &p_ir)?.max(1e-9);
                    let m = l1_distance(p_rag, p_llm)?.max(1e-9);
                    Ok(OracleScored {
                        label: s.label,
                        score,
                        rule_benefit: 1.0 / d >= 1.0 / m,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_case.into_iter().flatten().collect())
}

/// Every method over the suite; each sentence is scored under its own world.
pub fn evaluate_oracle_suite(
    cases: &[OracleCase],
    methods: &[Method],
    options: &ScoringOptions,
    cap: Option<usize>,
) -> Result<Vec<EvalReport>> {
    let mut sets = vec![ScoredSet::default(); methods.len()];
    for (i, case) in cases.iter().enumerate() {
        let model = ModelHandle::Oracle(&case.world);
        let items = std::slice::from_ref(&case.item);
        let samples = build_dataset(model, items, cap, options.seed.wrapping_add(i as u64))?;
        let case_options = ScoringOptions {
            seed: options.seed.wrapping_add((i as u64) << 40),
            ..options.clone()
        };
        for (set, &method) in sets.iter_mut().zip(methods) {
            set.extend(score_set(model, items, &samples, method, &case_options)?);
        }
    }
    sets.into_iter()
        .zip(methods)
        .map(|(set, &m)| set.into_report(m))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn label_rules() {
        assert_eq!(label_for(3, 1, 3), Some(1));
        assert_eq!(label_for(3, 3, 1), Some(0));
        assert_eq!(label_for(3, 3, 3), None);
        assert_eq!(label_for(3, 1, 2), None);
    }

    #[test]
    fn metric_examples() {
        let r = compute_metrics("x", vec![0.9, 0.8, -0.3, -0.1], vec![1, 1, 0, 0]).unwrap();
        assert_eq!((r.auc, r.f1), (1.0, 1.0));
        let r = compute_metrics("x", vec![0.2; 4], vec![1, 0, 0, 1]).unwrap();
        assert_eq!(r.auc, 0.5);
        assert!(matches!(compute_metrics("x", vec![0.1], vec![0]), Err(Error::Metric(_))));
    }

    #[test]
    fn baseline_examples() {
        let rag = pv(&[0.9, 0.1]);
        let llm = pv(&[0.1, 0.9]);
        assert!((score_logprobs(&rag, &llm, 1, 0) - 0.0).abs() < 1e-12);
        let rag = pv(&[0.9, 0.05, 0.05]);
        let llm = pv(&[0.05, 0.1, 0.85]);
        let s = score_logprobs(&rag, &llm, 1, 0);
        assert!((s - 9.0f64.ln()).abs() < 1e-12);
        let mut point = vec![0.0; 8];
        point[0] = 1.0;
        let uniform = ProbVector::uniform(8).unwrap();
        assert!((score_entropy(&pv(&point), &uniform) - 8.0f64.ln()).abs() < 1e-12);
        assert_eq!(score_entropy(&uniform, &uniform), 0.0);
    }

    #[test]
    fn consistency_limits() {
        let a = pv(&[0.6, 0.3, 0.1]);
        let b = pv(&[0.2, 0.5, 0.3]);
        assert_eq!(score_lexical_consistency(&a, &b, 10, 1e-3, 1).unwrap(), 0.0);
        assert_eq!(
            score_lexical_consistency(&a, &b, 10, 0.7, 4).unwrap(),
            score_lexical_consistency(&a, &b, 10, 0.7, 4).unwrap()
        );
        assert!(score_lexical_consistency(&a, &b, 10, 0.0, 1).is_err());
        assert!(score_lexical_consistency(&a, &b, 1, 1.0, 1).is_err());
    }

    #[test]
    fn truncation_counts() {
        assert_eq!(truncation_points(5, None, 0), vec![1, 2, 3, 4]);
        let capped = truncation_points(20, Some(8), 3);
        assert_eq!(capped.len(), 8);
        assert!(capped.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(capped, truncation_points(20, Some(8), 3));
    }
}
