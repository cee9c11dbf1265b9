//! Layer-wise probes over transformer traces: attention mass on the
//! retrieved span, lens-distribution change, fusion-layer detection and the
//! matching estimate of the retrieval distribution.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{LayerTrace, ModelWeights};
use crate::numerics::{js_divergence, softmax_unchecked, ProbVector};
use crate::retrieved::TokenId;

/// Threshold on the distribution-change series used for imported 7B-scale
/// traces; tiny models calibrate their own.
pub const DEFAULT_THRESHOLD: f64 = 5e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionPoint {
    pub l_star: usize,
    pub argmax_f: usize,
    pub first_g_cross: usize,
    pub threshold_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSeries {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub retrieved_span: Range<usize>,
}

fn check_span(trace: &LayerTrace, span: &Range<usize>) -> Result<()> {
    if span.start > span.end || span.end > trace.len() {
        return Err(Error::Range(format!(
            "span {}..{} outside sequence of length {}",
            span.start,
            span.end,
            trace.len()
        )));
    }
    Ok(())
}

/// Per block, the head-averaged attention mass from the last position onto
/// `span`.
pub fn attention_mass_series(trace: &LayerTrace, span: Range<usize>) -> Result<Vec<f64>> {
    check_span(trace, &span)?;
    let last = trace.len() - 1;
    Ok(trace
        .attention
        .iter()
        .map(|heads| {
            let total: f64 = heads
                .iter()
                .map(|h| h[last][span.clone()].iter().sum::<f64>())
                .sum();
            (total / heads.len() as f64).clamp(0.0, 1.0)
        })
        .collect())
}

/// Per block `b`, `|JSD(lens h̃_b, lens h̃_{b+1}) − JSD(lens h_b, lens h_{b+1})|`
/// at the last position of each trace.
pub fn dist_change_series(
    trace_rag: &LayerTrace,
    trace_llm: &LayerTrace,
    weights: &ModelWeights,
) -> Result<Vec<f64>> {
    let layers = weights.config.layers;
    if trace_rag.layers() != layers || trace_llm.layers() != layers {
        return Err(Error::InvalidInput(format!(
            "traces have {} and {} layers, model has {layers}",
            trace_rag.layers(),
            trace_llm.layers()
        )));
    }
    let lenses = |trace: &LayerTrace| -> Result<Vec<ProbVector>> {
        let last = trace.len() - 1;
        trace
            .hidden
            .iter()
            .map(|h| weights.logit_lens(&h[last]))
            .collect()
    };
    let rag = lenses(trace_rag)?;
    let llm = lenses(trace_llm)?;
    (0..layers)
        .map(|b| {
            let a = js_divergence(&rag[b], &rag[b + 1])?;
            let c = js_divergence(&llm[b], &llm[b + 1])?;
            Ok((a - c).abs())
        })
        .collect()
}

fn first_argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `l* = ⌊(argmax f + min{l : g(l) > a}) / 2⌋` over series indexed by layer.
pub fn fusion_layer(f: &[f64], g: &[f64], a: f64) -> Result<FusionPoint> {
    let labels: Vec<usize> = (0..f.len().max(g.len())).collect();
    fusion_layer_labeled(f, g, a, &labels)
}

/// As [`fusion_layer`] for series sampled at the given layer numbers.
pub fn fusion_layer_labeled(f: &[f64], g: &[f64], a: f64, layers: &[usize]) -> Result<FusionPoint> {
    if f.is_empty() || g.is_empty() {
        return Err(Error::InvalidInput("empty probe series".into()));
    }
    if f.len() > layers.len() || g.len() > layers.len() {
        return Err(Error::Shape {
            left: f.len().max(g.len()),
            right: layers.len(),
        });
    }
    let argmax_f = layers[first_argmax(f)];
    let cross = g.iter().position(|&x| x > a).ok_or_else(|| {
        Error::Detection(format!("no layer has distribution change above a = {a}"))
    })?;
    let first_g_cross = layers[cross];
    Ok(FusionPoint {
        l_star: (argmax_f + first_g_cross) / 2,
        argmax_f,
        first_g_cross,
        threshold_a: a,
    })
}

/// Estimate of the retrieval distribution from matching at block `l_star`.
///
/// `ids` is the full model input behind `trace`; positions in `span`
/// holding `skip` (the delimiter) are not candidates.
pub fn matching_distribution(
    trace: &LayerTrace,
    weights: &ModelWeights,
    ids: &[TokenId],
    span: Range<usize>,
    l_star: usize,
    skip: Option<TokenId>,
) -> Result<ProbVector> {
    check_span(trace, &span)?;
    if ids.len() != trace.len() {
        return Err(Error::Shape {
            left: ids.len(),
            right: trace.len(),
        });
    }
    if l_star >= weights.config.layers {
        return Err(Error::Range(format!(
            "l* = {l_star} outside 0..{}",
            weights.config.layers
        )));
    }
    let positions: Vec<usize> = span.filter(|&j| Some(ids[j]) != skip).collect();
    if positions.is_empty() {
        return Err(Error::Detection("no retrieved tokens to match".into()));
    }
    let last = trace.len() - 1;
    let states = &trace.hidden[l_star];

    let scores = weights.query_key_scores(l_star, states, last, 0..last + 1)?;
    let mut att = vec![0.0; positions.len()];
    for head in &scores {
        let picked: Vec<f64> = positions.iter().map(|&j| head[j]).collect();
        for (a, w) in att.iter_mut().zip(softmax_unchecked(&picked)) {
            *a += w / scores.len() as f64;
        }
    }

    let early = weights.logit_lens_log(&states[last])?;
    let late = weights.logit_lens_log(&trace.hidden[weights.config.layers][last])?;
    let gains: Vec<f64> = late.iter().zip(&early).map(|(l, e)| l - e).collect();
    let pivot = first_argmax(&gains);
    let pivot_row = weights.embed.row(pivot);
    let sims: Vec<f64> = positions
        .iter()
        .map(|&j| {
            weights
                .embed
                .row(ids[j] as usize)
                .iter()
                .zip(pivot_row)
                .map(|(&x, &y)| f64::from(x) * f64::from(y))
                .sum()
        })
        .collect();
    let word_sim = softmax_unchecked(&sims);

    let mut merged: BTreeMap<TokenId, f64> = BTreeMap::new();
    for ((&j, a), w) in positions.iter().zip(&att).zip(&word_sim) {
        *merged.entry(ids[j]).or_default() += a * w;
    }
    let present: Vec<(TokenId, f64)> = merged.into_iter().collect();
    let probs = softmax_unchecked(&present.iter().map(|p| p.1).collect::<Vec<_>>());
    let mut out = vec![0.0; weights.config.vocab_size];
    for ((id, _), p) in present.iter().zip(probs) {
        out[*id as usize] = p;
    }
    ProbVector::from_unnormalized(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ModelConfig;

    const FIXTURE_LAYERS: [usize; 9] = [0, 4, 8, 12, 16, 20, 24, 28, 32];
    const FIXTURE_F: [f64; 9] = [0.12, 0.79, 0.65, 0.51, 0.59, 0.72, 0.86, 0.69, 0.43];
    const FIXTURE_G: [f64; 9] = [0.10, 0.11, 0.10, 0.10, 0.13, 0.22, 0.38, 0.56, 0.82];

    fn model() -> ModelWeights {
        ModelWeights::random(
            ModelConfig {
                layers: 3,
                d_model: 8,
                heads: 2,
                head_dim: 4,
                vocab_size: 12,
                context: 16,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn opt_fixture() {
        let p = fusion_layer_labeled(&FIXTURE_F, &FIXTURE_G, 0.3, &FIXTURE_LAYERS).unwrap();
        assert_eq!((p.argmax_f, p.first_g_cross, p.l_star), (24, 24, 24));
    }

    #[test]
    fn boundary_and_errors() {
        let p = fusion_layer(&[0.9, 0.1], &[0.5, 0.6], 0.3).unwrap();
        assert_eq!(p.l_star, 0);
        let p = fusion_layer(&[0.1, 0.9, 0.9, 0.2], &[0.0, 0.0, 0.0, 0.7], 0.3).unwrap();
        assert_eq!((p.argmax_f, p.first_g_cross, p.l_star), (1, 3, 2));
        assert!(matches!(fusion_layer(&[0.5], &[0.1], 0.3), Err(Error::Detection(_))));
    }

    #[test]
    fn attention_mass_cases() {
        let m = model();
        let tr = m.forward_trace(&[1, 2, 3, 4, 5]).unwrap();
        for v in attention_mass_series(&tr, 0..5).unwrap() {
            assert!((v - 1.0).abs() < 1e-9);
        }
        assert!(attention_mass_series(&tr, 2..2).unwrap().iter().all(|&v| v == 0.0));
        assert!(matches!(attention_mass_series(&tr, 0..6), Err(Error::Range(_))));
    }

    #[test]
    fn identical_traces_have_no_change_difference() {
        let m = model();
        let tr = m.forward_trace(&[1, 2, 3]).unwrap();
        assert!(dist_change_series(&tr, &tr, &m).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn matching_single_and_merged() {
        let m = model();
        let ids = [7, 1, 2];
        let tr = m.forward_trace(&ids).unwrap();
        let p = matching_distribution(&tr, &m, &ids, 0..1, 1, Some(1)).unwrap();
        assert_eq!(p.get(7), 1.0);
        let ids = [4, 4, 1, 9];
        let tr = m.forward_trace(&ids).unwrap();
        let p = matching_distribution(&tr, &m, &ids, 0..3, 0, Some(1)).unwrap();
        assert_eq!(p.get(4), 1.0);
        assert!(matches!(
            matching_distribution(&tr, &m, &ids, 2..3, 0, Some(1)),
            Err(Error::Detection(_))
        ));
        assert!(matches!(
            matching_distribution(&tr, &m, &ids, 0..3, 3, Some(1)),
            Err(Error::Range(_))
        ));
    }
}
