//! Exact Bayesian inference in an [`HmmWorld`].

use crate::error::{Error, Result};
use crate::hmm::world::{ConceptModel, HmmWorld};
use crate::lm::LanguageModel;
use crate::numerics::{log_sum_exp, ProbVector};
use crate::retrieved::{RetrievedList, TokenId};

/// Scaled forward pass. Returns the log-likelihood of `tokens` and the
/// state distribution for the next position, or `None` when the sequence
/// is impossible.
pub(crate) fn filter(concept: &ConceptModel, tokens: &[TokenId]) -> Option<(f64, Vec<f64>)> {
    let s = concept.initial.len();
    let mut pred = concept.initial.clone();
    let mut loglik = 0.0;
    let mut alpha = vec![0.0; s];
    for &t in tokens {
        let t = t as usize;
        for j in 0..s {
            alpha[j] = pred[j] * concept.emission[j][t];
        }
        let c: f64 = alpha.iter().sum();
        if !(c > 0.0) {
            return None;
        }
        loglik += c.ln();
        for a in alpha.iter_mut() {
            *a /= c;
        }
        for (j, p) in pred.iter_mut().enumerate() {
            *p = (0..s).map(|i| alpha[i] * concept.transition[i][j]).sum();
        }
    }
    Some((loglik, pred))
}

fn emit(concept: &ConceptModel, state_dist: &[f64]) -> Vec<f64> {
    let v = concept.emission[0].len();
    let mut out = vec![0.0; v];
    for (p, row) in state_dist.iter().zip(&concept.emission) {
        for (o, e) in out.iter_mut().zip(row) {
            *o += p * e;
        }
    }
    out
}

fn check_tokens(world: &HmmWorld, tokens: &[TokenId]) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= world.vocab_size()) {
        Some(t) => Err(Error::InvalidInput(format!(
            "token {t} outside vocabulary of size {}",
            world.vocab_size()
        ))),
        None => Ok(()),
    }
}

/// log p(tokens | concept); `-inf` for impossible sequences.
pub fn sequence_log_likelihood(world: &HmmWorld, concept: usize, tokens: &[TokenId]) -> Result<f64> {
    check_tokens(world, tokens)?;
    let c = world
        .concept(concept)
        .ok_or_else(|| Error::Range(format!("concept index {concept}")))?;
    Ok(filter(c, tokens).map_or(f64::NEG_INFINITY, |(ll, _)| ll))
}

/// p(tokens | concept).
pub fn sequence_likelihood(world: &HmmWorld, concept: usize, tokens: &[TokenId]) -> Result<f64> {
    sequence_log_likelihood(world, concept, tokens).map(f64::exp)
}

/// Next-token distribution of a single concept after `context`.
pub fn concept_predictive(world: &HmmWorld, concept: usize, context: &[TokenId]) -> Result<ProbVector> {
    check_tokens(world, context)?;
    let c = world
        .concept(concept)
        .ok_or_else(|| Error::Range(format!("concept index {concept}")))?;
    let (_, pred) = filter(c, context)
        .ok_or_else(|| Error::Degenerate(format!("context impossible under concept {concept}")))?;
    ProbVector::from_unnormalized(emit(c, &pred))
}

struct Component {
    log_weight: f64,
    next: Vec<f64>,
}

fn components(
    world: &HmmWorld,
    indices: &[usize],
    log_prior: &[f64],
    context: &[TokenId],
) -> Result<Vec<Component>> {
    check_tokens(world, context)?;
    let mut out = Vec::with_capacity(indices.len());
    for (&k, &lp) in indices.iter().zip(log_prior) {
        let c = world.concept(k).expect("index in range");
        let comp = match filter(c, context) {
            Some((ll, pred)) if lp > f64::NEG_INFINITY => Component {
                log_weight: lp + ll,
                next: emit(c, &pred),
            },
            _ => Component {
                log_weight: f64::NEG_INFINITY,
                next: Vec::new(),
            },
        };
        out.push(comp);
    }
    Ok(out)
}

fn posterior_weights(comps: &[Component]) -> Result<Vec<f64>> {
    let logs: Vec<f64> = comps.iter().map(|c| c.log_weight).collect();
    let z = log_sum_exp(&logs);
    if !z.is_finite() {
        return Err(Error::Degenerate(
            "context has zero probability under every concept".into(),
        ));
    }
    Ok(logs.iter().map(|l| (l - z).exp()).collect())
}

fn mix(comps: &[Component], weights: &[f64], v: usize) -> Vec<f64> {
    let mut out = vec![0.0; v];
    for (c, &w) in comps.iter().zip(weights) {
        if w > 0.0 {
            for (o, p) in out.iter_mut().zip(&c.next) {
                *o += w * p;
            }
        }
    }
    out
}

fn model_components(world: &HmmWorld, context: &[TokenId]) -> Result<Vec<Component>> {
    let indices: Vec<usize> = (0..world.concept_count()).collect();
    let log_prior: Vec<f64> = world.prior().as_slice().iter().map(|p| p.ln()).collect();
    components(world, &indices, &log_prior, context)
}

/// p(z | context) over the model's concepts.
pub fn concept_posterior_given(world: &HmmWorld, context: &[TokenId]) -> Result<ProbVector> {
    let comps = model_components(world, context)?;
    ProbVector::from_unnormalized(posterior_weights(&comps)?)
}

/// p(z | R, prefix) over the model's concepts.
pub fn concept_posterior(world: &HmmWorld, retrieved: &RetrievedList, prefix: &[TokenId]) -> Result<ProbVector> {
    concept_posterior_given(world, &retrieved.rag_input(prefix))
}

/// Bayesian next-token predictive of the model without retrieval.
pub fn predictive_llm(world: &HmmWorld, prefix: &[TokenId]) -> Result<ProbVector> {
    let comps = model_components(world, prefix)?;
    let w = posterior_weights(&comps)?;
    ProbVector::from_unnormalized(mix(&comps, &w, world.vocab_size()))
}

/// The retrieval-augmented predictive split by concept.
#[derive(Debug, Clone, PartialEq)]
pub struct RagPrediction {
    pub distribution: ProbVector,
    /// Posterior-weighted next-token mass from concepts other than z*.
    pub phi: Vec<f64>,
    /// Posterior-weighted next-token mass from z*.
    pub lambda: Vec<f64>,
    /// p(z* | R, prefix).
    pub star_posterior: f64,
}

pub fn predictive_rag(world: &HmmWorld, retrieved: &RetrievedList, prefix: &[TokenId]) -> Result<RagPrediction> {
    if retrieved.delimiter() != world.delimiter_token() {
        return Err(Error::InvalidInput(format!(
            "retrieved list delimiter {} differs from world delimiter {}",
            retrieved.delimiter(),
            world.delimiter_token()
        )));
    }
    let comps = model_components(world, &retrieved.rag_input(prefix))?;
    let w = posterior_weights(&comps)?;
    let v = world.vocab_size();
    let star = world.star_index();
    let mut phi = vec![0.0; v];
    let mut lambda = vec![0.0; v];
    for (k, (c, &wk)) in comps.iter().zip(&w).enumerate() {
        if wk == 0.0 {
            continue;
        }
        let target = if k == star { &mut lambda } else { &mut phi };
        for (o, p) in target.iter_mut().zip(&c.next) {
            *o += wk * p;
        }
    }
    let total: Vec<f64> = phi.iter().zip(&lambda).map(|(a, b)| a + b).collect();
    Ok(RagPrediction {
        distribution: ProbVector::from_unnormalized(total)?,
        phi,
        lambda,
        star_posterior: w[star],
    })
}

/// Next-token predictive of the retrieval source
/// `q · HMM(z*) + (1 - q) · HMM(noise)` after `prefix`.
pub fn predictive_retrieval(world: &HmmWorld, prefix: &[TokenId]) -> Result<ProbVector> {
    let q = world.retrieval_quality();
    let indices = [world.star_index(), world.noise_index()];
    let log_prior = [q.ln(), (1.0 - q).ln()];
    let comps = components(world, &indices, &log_prior, prefix)?;
    let w = posterior_weights(&comps)?;
    ProbVector::from_unnormalized(mix(&comps, &w, world.vocab_size()))
}

impl LanguageModel for HmmWorld {
    fn vocab_size(&self) -> usize {
        HmmWorld::vocab_size(self)
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<ProbVector> {
        predictive_llm(self, context)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::world::{sample_passages, sample_world, WorldConfig};

    /// Sum over every hidden path; exponential, for tiny cases only.
    fn brute_force(c: &ConceptModel, tokens: &[TokenId]) -> f64 {
        let s = c.initial.len();
        let mut total = 0.0;
        let paths = s.pow(tokens.len() as u32);
        for code in 0..paths {
            let mut states = Vec::with_capacity(tokens.len());
            let mut x = code;
            for _ in 0..tokens.len() {
                states.push(x % s);
                x /= s;
            }
            let mut p = c.initial[states[0]] * c.emission[states[0]][tokens[0] as usize];
            for i in 1..tokens.len() {
                p *= c.transition[states[i - 1]][states[i]] * c.emission[states[i]][tokens[i] as usize];
            }
            total += p;
        }
        total
    }

    #[test]
    fn forward_matches_path_sum() {
        let w = sample_world(&WorldConfig::default(), 4).unwrap();
        let seqs: [&[TokenId]; 4] = [&[0], &[1, 2], &[3, 5, 0], &[4, 4, 5, 1, 2]];
        for k in 0..=w.concept_count() {
            for s in seqs {
                let fast = sequence_likelihood(&w, k, s).unwrap();
                let slow = brute_force(w.concept(k).unwrap(), s);
                assert!((fast - slow).abs() <= 1e-12 * slow.max(1e-300), "{fast} vs {slow}");
            }
        }
    }

    #[test]
    fn delimiters_are_possible_and_bad_tokens_rejected() {
        let w = sample_world(&WorldConfig::default(), 4).unwrap();
        let d = w.delimiter_token();
        assert!(sequence_likelihood(&w, 0, &[d, d]).unwrap() > 0.0);
        assert!(sequence_likelihood(&w, 0, &[9]).is_err());
    }

    #[test]
    fn posterior_matches_bayes_rule() {
        let w = sample_world(&WorldConfig::default(), 6).unwrap();
        let ctx = [0, 3, 1, 2];
        let post = concept_posterior_given(&w, &ctx).unwrap();
        let joint: Vec<f64> = (0..w.concept_count())
            .map(|k| w.prior().get(k) * brute_force(w.concept(k).unwrap(), &ctx))
            .collect();
        let z: f64 = joint.iter().sum();
        for k in 0..w.concept_count() {
            assert!((post.get(k) - joint[k] / z).abs() < 1e-12);
        }
    }

    #[test]
    fn predictive_is_ratio_of_likelihoods() {
        let w = sample_world(&WorldConfig::default(), 6).unwrap();
        let ctx = [2, 1];
        let p = predictive_llm(&w, &ctx).unwrap();
        let marg = |t: &[TokenId]| -> f64 {
            (0..w.concept_count())
                .map(|k| w.prior().get(k) * brute_force(w.concept(k).unwrap(), t))
                .sum()
        };
        let base = marg(&ctx);
        for x in 0..w.vocab_size() as TokenId {
            let expected = marg(&[2, 1, x]) / base;
            assert!((p.get(x as usize) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn rag_split_sums_to_distribution() {
        let w = sample_world(&WorldConfig::default().with_quality(0.6), 2).unwrap();
        let r = sample_passages(&w, 3, 3, 1).unwrap();
        let pred = predictive_rag(&w, &r, &[1]).unwrap();
        for i in 0..w.vocab_size() {
            assert!((pred.phi[i] + pred.lambda[i] - pred.distribution.get(i)).abs() < 1e-12);
        }
        let lam: f64 = pred.lambda.iter().sum();
        assert!((lam - pred.star_posterior).abs() < 1e-12);
        let same = w.next_distribution(&r.rag_input(&[1])).unwrap();
        for i in 0..w.vocab_size() {
            assert!((same.get(i) - pred.distribution.get(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn retrieval_predictive_endpoints() {
        let base = sample_world(&WorldConfig::default(), 2).unwrap();
        let prefix = [0, 1];
        let star = concept_predictive(&base, base.star_index(), &prefix).unwrap();
        let noise = concept_predictive(&base, base.noise_index(), &prefix).unwrap();
        let hi = predictive_retrieval(&base.with_retrieval_quality(1.0).unwrap(), &prefix).unwrap();
        let lo = predictive_retrieval(&base.with_retrieval_quality(0.0).unwrap(), &prefix).unwrap();
        for i in 0..base.vocab_size() {
            assert!((hi.get(i) - star.get(i)).abs() < 1e-12);
            assert!((lo.get(i) - noise.get(i)).abs() < 1e-12);
        }
    }
}
