//! Probability and statistics kernels.
//!
//! All divergences and entropies are in nats. Every function is pure and
//! deterministic: identical inputs give bit-identical outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothing mass added to every entry before a KL whose reference may
/// contain zeros on the support of the first argument.
pub const KL_SMOOTHING: f64 = 1e-12;

/// Accepted drift of a caller-supplied distribution from unit mass before
/// it is renormalized.
const INPUT_MASS_TOLERANCE: f64 = 1e-9;

/// A normalized discrete distribution over a fixed vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates and renormalizes `weights`. The input must be non-empty,
    /// finite, non-negative and sum to one within 1e-9.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let sum = check_weights(&weights)?;
        if (sum - 1.0).abs() > INPUT_MASS_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "weights sum to {sum}, expected 1"
            )));
        }
        Ok(Self::renormalized(weights, sum))
    }

    /// Normalizes arbitrary non-negative mass into a distribution.
    pub fn from_unnormalized(weights: Vec<f64>) -> Result<Self> {
        let sum = check_weights(&weights)?;
        if sum <= 0.0 {
            return Err(Error::Degenerate("all weights are zero".into()));
        }
        Ok(Self::renormalized(weights, sum))
    }

    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidInput("empty distribution".into()));
        }
        Ok(Self(vec![1.0 / len as f64; len]))
    }

    pub fn point_mass(len: usize, index: usize) -> Result<Self> {
        if index >= len {
            return Err(Error::Range(format!("index {index} outside 0..{len}")));
        }
        let mut w = vec![0.0; len];
        w[index] = 1.0;
        Ok(Self(w))
    }

    fn renormalized(mut weights: Vec<f64>, sum: f64) -> Self {
        if sum != 1.0 {
            for w in &mut weights {
                *w /= sum;
            }
        }
        Self(weights)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, index: usize) -> f64 {
        self.0[index]
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest weight; ties go to the smallest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .0
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    /// `(p + eps) / (1 + V eps)`: strictly positive, still normalized.
    pub fn smoothed(&self, eps: f64) -> Self {
        let denom = 1.0 + eps * self.0.len() as f64;
        Self(self.0.iter().map(|&p| (p + eps) / denom).collect())
    }

    /// Keeps the `k` largest entries (ties by smaller index) and renormalizes.
    pub fn top_k(&self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidInput("top-k with k = 0".into()));
        }
        let mut order: Vec<usize> = (0..self.0.len()).collect();
        order.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        let mut kept = vec![0.0; self.0.len()];
        for &i in order.iter().take(k) {
            kept[i] = self.0[i];
        }
        Self::from_unnormalized(kept)
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;
    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(value: ProbVector) -> Self {
        value.0
    }
}

fn check_weights(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::InvalidInput("empty distribution".into()));
    }
    let mut sum = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::InvalidInput(format!("weight[{i}] = {w}")));
        }
        sum += w;
    }
    Ok(sum)
}

/// Unnormalized real scores (logits, similarities).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::InvalidInput("empty score vector".into()));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "score[{i}] = {} is not finite",
                scores[i]
            )));
        }
        Ok(Self(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn softmax(&self) -> ProbVector {
        ProbVector(softmax_unchecked(&self.0))
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Max-subtracted softmax.
pub fn softmax(scores: &[f64]) -> Result<ProbVector> {
    Ok(ScoreVector::new(scores.to_vec())?.softmax())
}

pub(crate) fn softmax_unchecked(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

/// Log-softmax computed with the log-sum-exp trick.
pub fn log_softmax(scores: &[f64]) -> Result<Vec<f64>> {
    let scores = ScoreVector::new(scores.to_vec())?;
    let max = scores.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.0.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
    Ok(scores.0.iter().map(|&s| s - lse).collect())
}

/// `ln Σ exp(x)`, returning `-inf` when every term is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape { left: a, right: b });
    }
    Ok(())
}

/// KL(p ‖ q) without smoothing. Fails if `q` is zero where `p` is not.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    same_len(p.len(), q.len())?;
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.0.iter().zip(&q.0).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::Support { index: i, p: pi });
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl.max(0.0))
}

/// KL(p ‖ smooth(q)) with [`KL_SMOOTHING`]; always finite.
pub fn kl_divergence_smoothed(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    same_len(p.len(), q.len())?;
    kl_divergence(p, &q.smoothed(KL_SMOOTHING))
}

/// Jensen-Shannon divergence in nats, bounded by ln 2.
pub fn js_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    same_len(p.len(), q.len())?;
    let half = |a: f64, b: f64| {
        if a == 0.0 {
            0.0
        } else {
            a * (2.0 * a / (a + b)).ln()
        }
    };
    let js: f64 = p
        .0
        .iter()
        .zip(&q.0)
        .map(|(&a, &b)| 0.5 * (half(a, b) + half(b, a)))
        .sum();
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

pub fn l1_distance(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    l1_raw(p.as_slice(), q.as_slice())
}

/// L1 distance between arbitrary equal-length vectors.
pub fn l1_raw(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    same_len(u.len(), v.len())?;
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("constant sequence".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    same_len(xs.len(), ys.len())?;
    if xs.len() < 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            got: xs.len(),
        });
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value in rank data".into()));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn pv(w: &[f64]) -> ProbVector {
        ProbVector::new(w.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap().as_slice(), &[0.5, 0.5]);
        let p = softmax(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert!((p.get(0) - 0.25).abs() < 1e-15);
        assert!((p.get(1) - 0.75).abs() < 1e-15);
        assert_eq!(softmax(&[1000.0, 1000.0]).unwrap().as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax(&[0.0, f64::NAN]),
            Err(Error::InvalidInput(_))
        ));
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&pv(&[0.3, 0.7]), &pv(&[0.3, 0.7])).unwrap(), 0.0);
        // 0.5 ln 2 + 0.5 ln(2/3)
        let kl = kl_divergence(&pv(&[0.5, 0.5]), &pv(&[0.25, 0.75])).unwrap();
        assert!((kl - 0.143_841_036).abs() < 1e-4);
        let kl = kl_divergence(&pv(&[1.0, 0.0]), &pv(&[0.5, 0.5])).unwrap();
        assert!((kl - LN_2).abs() < 1e-15);
    }

    #[test]
    fn kl_support_and_shape_errors() {
        let err = kl_divergence(&pv(&[0.5, 0.5]), &pv(&[1.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Support { index: 1, .. }));
        let smoothed = kl_divergence_smoothed(&pv(&[0.5, 0.5]), &pv(&[1.0, 0.0])).unwrap();
        assert!(smoothed.is_finite() && smoothed > 10.0);
        assert!(matches!(
            kl_divergence(&pv(&[1.0]), &pv(&[0.5, 0.5])),
            Err(Error::Shape { left: 1, right: 2 })
        ));
    }

    #[test]
    fn js_examples() {
        let p = pv(&[0.2, 0.8]);
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        let js = js_divergence(&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0])).unwrap();
        assert!((js - LN_2).abs() < 1e-15);
        assert!(js_divergence(&p, &pv(&[1.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_distance(&pv(&[0.4, 0.6]), &pv(&[0.4, 0.6])).unwrap(), 0.0);
        let d = l1_distance(&pv(&[0.7, 0.3]), &pv(&[0.4, 0.6])).unwrap();
        assert!((d - 0.6).abs() < 1e-12);
        assert_eq!(l1_distance(&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0])).unwrap(), 2.0);
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-4);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman_rho(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman_rho(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // 1 - 6 * 2 / (4 * 15)
        let r = spearman_rho(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
    }

    #[test]
    fn spearman_errors() {
        assert!(matches!(
            spearman_rho(&[1.0, 2.0], &[1.0, 2.0]),
            Err(Error::InsufficientData { needed: 3, got: 2 })
        ));
        assert!(matches!(
            spearman_rho(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![]).is_err());
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.1, 1.1]).is_err());
        let p = ProbVector::new(vec![0.1, 0.2, 0.7]).unwrap();
        assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(p.argmax(), 2);
        assert_eq!(pv(&[0.5, 0.5]).argmax(), 0);
    }

    #[test]
    fn top_k_renormalizes() {
        let p = pv(&[0.1, 0.5, 0.4]).top_k(2).unwrap();
        assert!((p.get(1) - 5.0 / 9.0).abs() < 1e-15);
        assert_eq!(p.get(0), 0.0);
    }

    #[test]
    fn entropy_of_uniform_is_ln_v() {
        let u = ProbVector::uniform(8).unwrap();
        assert!((u.entropy() - 8f64.ln()).abs() < 1e-12);
    }
}
