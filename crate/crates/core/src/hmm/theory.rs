//! Benefit, detriment and the checks built on them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::inference::{predictive_llm, predictive_rag, predictive_retrieval};
use crate::hmm::world::{sample_passages, sample_world, HmmWorld, PassageProcess, WorldConfig};
use crate::numerics::{kl_divergence, l1_distance, l1_raw, spearman_rho, ProbVector};
use crate::retrieved::{RetrievedList, TokenId};

pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;
pub const INVERSE_FLOOR: f64 = 1e-9;
const SANDWICH_TOLERANCE: f64 = 1e-9;

/// Probabilities of every delimiter-free sequence of `length` tokens, in
/// lexicographic order.
fn enumerate(process: &PassageProcess, symbols: usize, length: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(symbols.pow(length as u32));
    if length == 0 {
        out.push(1.0);
        return out;
    }
    fn walk(p: &PassageProcess, alpha: Vec<f64>, left: usize, symbols: usize, out: &mut Vec<f64>) {
        if left == 0 {
            out.push(alpha.iter().sum());
            return;
        }
        for t in 0..symbols {
            let next = p.step(&alpha, t as TokenId);
            walk(p, next, left - 1, symbols, out);
        }
    }
    for t in 0..symbols {
        let alpha: Vec<f64> = p_first(process, t);
        walk(process, alpha, length - 1, symbols, &mut out);
    }
    out
}

fn p_first(p: &PassageProcess, token: usize) -> Vec<f64> {
    p.initial
        .iter()
        .zip(&p.emission)
        .map(|(pi, e)| pi * e[token])
        .collect()
}

fn check_cap(world: &HmmWorld, length: usize, cap: u64) -> Result<()> {
    let count = (world.vocab_size() as u64).checked_pow(length as u32);
    match count {
        Some(n) if n <= cap => Ok(()),
        _ => Err(Error::Capacity(format!(
            "{}^{length} sequences exceed the enumeration cap of {cap}",
            world.vocab_size()
        ))),
    }
}

/// Ω for every model concept and the shared Υ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenefitProfile {
    pub omegas: Vec<f64>,
    pub upsilon: f64,
}

impl BenefitProfile {
    /// The competitor closest to the retrieval distribution (smallest Ω
    /// among concepts other than z*); falls back to z* when K = 1.
    pub fn strongest_competitor(&self, star: usize) -> usize {
        self.omegas
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != star)
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map_or(star, |(k, _)| k)
    }
}

/// Sequence-level KL terms over every passage of `passage_length` tokens.
pub fn benefit_profile(world: &HmmWorld, passage_length: usize, cap: u64) -> Result<BenefitProfile> {
    check_cap(world, passage_length, cap)?;
    let symbols = world.vocab_size() - 1;
    let q = world.retrieval_quality();
    let star = enumerate(world.passage_process(world.star_index()), symbols, passage_length);
    let noise = enumerate(world.passage_process(world.noise_index()), symbols, passage_length);
    let mixture: Vec<f64> = star
        .iter()
        .zip(&noise)
        .map(|(a, b)| q * a + (1.0 - q) * b)
        .collect();
    let p_r = ProbVector::from_unnormalized(mixture)?;
    let omegas = (0..world.concept_count())
        .map(|k| {
            let pz = if k == world.star_index() {
                star.clone()
            } else {
                enumerate(world.passage_process(k), symbols, passage_length)
            };
            kl_divergence(&p_r, &ProbVector::from_unnormalized(pz)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let upsilon = omegas[world.star_index()];
    Ok(BenefitProfile { omegas, upsilon })
}

/// (Ω, Υ) for concept `z`: Ω = KL(p_R ‖ p(·|z)), Υ = KL(p_R ‖ p(·|z*)).
pub fn benefit_detriment(world: &HmmWorld, z: usize, passage_length: usize) -> Result<(f64, f64)> {
    if z >= world.concept_count() {
        return Err(Error::Range(format!(
            "concept {z} outside 0..{}",
            world.concept_count()
        )));
    }
    let profile = benefit_profile(world, passage_length, DEFAULT_ENUMERATION_CAP)?;
    Ok((profile.omegas[z], profile.upsilon))
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckRecord {
    pub probe: usize,
    pub benefit: f64,
    pub detriment: f64,
    pub phi_norm: f64,
    pub lambda_residual: f64,
    #[serde(rename = "D")]
    pub d: f64,
    #[serde(rename = "M")]
    pub m: f64,
    pub star_posterior: f64,
    pub rule_prediction: i8,
    pub ground_truth: i8,
    pub kl_bound_held: bool,
}

fn check(
    world: &HmmWorld,
    retrieved: &RetrievedList,
    prefix: &[TokenId],
    passage_length: usize,
    probe: Option<usize>,
) -> Result<BoundCheckRecord> {
    let profile = benefit_profile(world, passage_length, DEFAULT_ENUMERATION_CAP)?;
    let probe = match probe {
        Some(z) if z < world.concept_count() => z,
        Some(z) => {
            return Err(Error::Range(format!(
                "probe concept {z} outside 0..{}",
                world.concept_count()
            )))
        }
        None => profile.strongest_competitor(world.star_index()),
    };
    let rag = predictive_rag(world, retrieved, prefix)?;
    let p_r = predictive_retrieval(world, prefix)?;
    let p_llm = predictive_llm(world, prefix)?;
    let d = l1_distance(&rag.distribution, &p_r)?;
    let m = l1_distance(&rag.distribution, &p_llm)?;
    let phi_norm: f64 = rag.phi.iter().sum();
    let lambda_residual = l1_raw(&rag.lambda, p_r.as_slice())?;
    let lower = (phi_norm - lambda_residual).abs();
    let upper = phi_norm + lambda_residual;
    if d < lower - SANDWICH_TOLERANCE || d > upper + SANDWICH_TOLERANCE {
        return Err(Error::Invariant(format!(
            "triangle sandwich violated: {lower} <= {d} <= {upper}"
        )));
    }
    let upsilon = profile.upsilon;
    let omega = profile.omegas[probe];
    let slack = (2.0 * upsilon).sqrt();
    let kl_bound_held = d >= phi_norm - slack - 1e-12 && d <= phi_norm + slack + 1e-12;
    let rule = 1.0 / d.max(INVERSE_FLOOR) - 1.0 / m.max(INVERSE_FLOOR);
    Ok(BoundCheckRecord {
        probe,
        benefit: omega,
        detriment: upsilon,
        phi_norm,
        lambda_residual,
        d,
        m,
        star_posterior: rag.star_posterior,
        rule_prediction: sign(rule),
        ground_truth: sign(omega - upsilon),
        kl_bound_held,
    })
}

/// Distance bounds for one prediction step, probing the strongest competitor.
///
/// Returns an invariant error if the triangle sandwich fails.
pub fn check_distance_bounds(
    world: &HmmWorld,
    retrieved: &RetrievedList,
    prefix: &[TokenId],
    passage_length: usize,
) -> Result<BoundCheckRecord> {
    check(world, retrieved, prefix, passage_length, None)
}

/// The benefit-versus-detriment rule against ground truth for `z_probe`.
pub fn check_decision_rule(
    world: &HmmWorld,
    retrieved: &RetrievedList,
    prefix: &[TokenId],
    passage_length: usize,
    z_probe: usize,
) -> Result<BoundCheckRecord> {
    check(world, retrieved, prefix, passage_length, Some(z_probe))
}

/// Maximum error rate `√Υ / e^Υ`.
pub fn error_envelope(upsilon: f64) -> Result<f64> {
    if !(upsilon >= 0.0) || !upsilon.is_finite() {
        return Err(Error::InvalidInput(format!(
            "detriment must be finite and non-negative, got {upsilon}"
        )));
    }
    Ok(upsilon.sqrt() / upsilon.exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub world: WorldConfig,
    pub seeds: Vec<u64>,
    pub q_grid: Vec<f64>,
    pub passages: usize,
    pub passage_length: usize,
    pub prefix_length: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            seeds: (0..50).collect(),
            q_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            passages: 8,
            passage_length: 3,
            prefix_length: 2,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        if self.seeds.is_empty() || self.q_grid.is_empty() {
            return Err(Error::InvalidInput("sweep needs seeds and a q grid".into()));
        }
        if let Some(q) = self.q_grid.iter().find(|q| !(0.0..=1.0).contains(*q)) {
            return Err(Error::Constraint(format!("q = {q} outside [0, 1]")));
        }
        if self.passages == 0 || self.passage_length == 0 {
            return Err(Error::InvalidInput(
                "need at least one passage of at least one token".into(),
            ));
        }
        Ok(())
    }
}

/// One row of a sweep report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub q: f64,
    pub omega: f64,
    pub upsilon: f64,
    pub phi_norm: f64,
    #[serde(rename = "D")]
    pub d: f64,
    #[serde(rename = "M")]
    pub m: f64,
    pub rule: i8,
    pub truth: i8,
    pub kl_bound_held: bool,
}

pub const SWEEP_CSV_HEADER: &str = "seed,q,omega,upsilon,phi_norm,D,M,rule,truth,paper_bound_held";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rho: f64,
    pub agreement_rate: f64,
    pub bound_hold_rate: f64,
    pub n: usize,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub(crate) fn derive_seed(seed: u64, q: f64, stream: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(q.to_bits())) ^ stream)
}

/// The retrieved list and prefix used for sweep cell `(seed, q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCase {
    pub world: HmmWorld,
    pub retrieved: RetrievedList,
    pub prefix: Vec<TokenId>,
}

/// Builds sweep cell `(seed, q)`. The concepts depend on `seed` only; the
/// passages and prefix on both.
pub fn sweep_case(config: &SweepConfig, seed: u64, q: f64) -> Result<SweepCase> {
    let world = sample_world(&config.world.with_quality(q), seed)?;
    let retrieved = sample_passages(
        &world,
        config.passages,
        config.passage_length,
        derive_seed(seed, q, 1),
    )?;
    let prefix = world.sample_sequence(
        world.star_index(),
        config.prefix_length,
        derive_seed(seed, q, 2),
    )?;
    Ok(SweepCase {
        world,
        retrieved,
        prefix,
    })
}

/// Evaluates every `(seed, q)` cell, in parallel on the current rayon pool.
/// Rows come back ordered by seed, then q.
pub fn run_sweep(config: &SweepConfig) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let cells: Vec<(u64, f64)> = config
        .seeds
        .iter()
        .flat_map(|&s| config.q_grid.iter().map(move |&q| (s, q)))
        .collect();
    cells
        .par_iter()
        .map(|&(seed, q)| {
            let case = sweep_case(config, seed, q)?;
            let r = check_distance_bounds(&case.world, &case.retrieved, &case.prefix, config.passage_length)?;
            Ok(SweepRow {
                seed,
                q,
                omega: r.benefit,
                upsilon: r.detriment,
                phi_norm: r.phi_norm,
                d: r.d,
                m: r.m,
                rule: r.rule_prediction,
                truth: r.ground_truth,
                kl_bound_held: r.kl_bound_held,
            })
        })
        .collect()
}

/// `(Ω − Υ, 1/D)` pairs with D floored before inversion.
pub fn correlation_pairs(rows: &[SweepRow]) -> Vec<(f64, f64)> {
    rows.iter()
        .map(|r| (r.omega - r.upsilon, 1.0 / r.d.max(INVERSE_FLOOR)))
        .collect()
}

pub fn summarize(rows: &[SweepRow]) -> Result<SweepSummary> {
    let pairs = correlation_pairs(rows);
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let n = rows.len();
    Ok(SweepSummary {
        rho: spearman_rho(&xs, &ys)?,
        agreement_rate: rows.iter().filter(|r| r.rule == r.truth).count() as f64 / n as f64,
        bound_hold_rate: rows.iter().filter(|r| r.kl_bound_held).count() as f64 / n as f64,
        n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSweep {
    pub pairs: Vec<(f64, f64)>,
    pub rho: f64,
}

/// Rank correlation between `Ω − Υ` and `1/D` across the sweep.
pub fn sweep_correlation(config: &SweepConfig) -> Result<CorrelationSweep> {
    let cells = config.seeds.len() * config.q_grid.len();
    if cells < 20 {
        return Err(Error::InsufficientData {
            needed: 20,
            got: cells,
        });
    }
    let rows = run_sweep(config)?;
    let pairs = correlation_pairs(&rows);
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let rho = spearman_rho(&xs, &ys)?;
    Ok(CorrelationSweep { pairs, rho })
}

/// CSV rendering of sweep rows, header included.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.seed, r.q, r.omega, r.upsilon, r.phi_norm, r.d, r.m, r.rule, r.truth, r.kl_bound_held
        ));
    }
    out
}
