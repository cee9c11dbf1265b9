//! Significance tests used by the theory sweeps and the evaluation harness.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};
use crate::numerics::{average_ranks, spearman_rho};

/// One-sided permutation p-value for a positive Spearman correlation.
///
/// Uses the `(hits + 1) / (permutations + 1)` estimator so the p-value is
/// never exactly zero.
pub fn spearman_permutation_p(
    xs: &[f64],
    ys: &[f64],
    permutations: usize,
    seed: u64,
) -> Result<f64> {
    let observed = spearman_rho(xs, ys)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = ys.to_vec();
    let mut hits = 0usize;
    for _ in 0..permutations {
        shuffled.shuffle(&mut rng);
        if spearman_rho(xs, &shuffled)? >= observed {
            hits += 1;
        }
    }
    Ok((hits + 1) as f64 / (permutations + 1) as f64)
}

/// P(X ≥ successes) for X ~ Binomial(trials, 1/2).
pub fn binomial_upper_tail(successes: usize, trials: usize) -> Result<f64> {
    if successes > trials {
        return Err(Error::InvalidInput(format!(
            "{successes} successes out of {trials} trials"
        )));
    }
    if successes == 0 {
        return Ok(1.0);
    }
    let dist = Binomial::new(0.5, trials as u64)
        .map_err(|e| Error::InvalidInput(format!("binomial: {e}")))?;
    Ok(dist.sf(successes as u64 - 1))
}

/// Area under the ROC curve via the Mann-Whitney rank statistic; tied
/// scores contribute one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            left: scores.len(),
            right: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 {
        return Err(Error::Metric("no positive (label 1) samples".into()));
    }
    if negatives == 0 {
        return Err(Error::Metric("no negative (label 0) samples".into()));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| r)
        .sum();
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// One-sided permutation p-value for AUC > 0.5 (labels shuffled).
pub fn auc_permutation_p(
    scores: &[f64],
    labels: &[u8],
    permutations: usize,
    seed: u64,
) -> Result<f64> {
    let observed = auc(scores, labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = labels.to_vec();
    let mut hits = 0usize;
    for _ in 0..permutations {
        shuffled.shuffle(&mut rng);
        if auc(scores, &shuffled)? >= observed {
            hits += 1;
        }
    }
    Ok((hits + 1) as f64 / (permutations + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomial_tail_matches_hand_values() {
        // P(X >= 3 | n = 3) = 1/8
        assert!((binomial_upper_tail(3, 3).unwrap() - 0.125).abs() < 1e-12);
        // P(X >= 2 | n = 3) = 4/8
        assert!((binomial_upper_tail(2, 3).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(binomial_upper_tail(0, 5).unwrap(), 1.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &[1, 0, 1, 0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.9], &[1, 0]).unwrap(), 0.0);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::Metric(_))));
    }

    #[test]
    fn permutation_p_small_for_perfect_correlation() {
        let xs: Vec<f64> = (0..30).map(f64::from).collect();
        let p = spearman_permutation_p(&xs, &xs, 999, 1).unwrap();
        assert!((p - 0.001).abs() < 1e-12);
    }
}
