//! Latent-concept HMM worlds and their seeded construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ProbVector;
use crate::retrieved::{RetrievedList, TokenId};

const ROW_TOLERANCE: f64 = 1e-12;
const MAX_ATTEMPTS: usize = 1000;

/// Parameters for [`sample_world`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    /// V, including the delimiter token (id `V - 1`).
    pub vocab_size: usize,
    /// S, including the delimiter state (index `S - 1`).
    pub state_count: usize,
    /// K, the number of concepts the model mixes over.
    pub concept_count: usize,
    /// Emission floor for every token from every non-delimiter state.
    pub c1: f64,
    /// Lower bound on transitions into the delimiter state.
    pub c2: f64,
    /// Upper bound on transitions into the delimiter state.
    pub c3: f64,
    /// Dirichlet concentration for transition and emission rows; smaller
    /// values give more distinguishable concepts.
    #[serde(default = "default_concentration")]
    pub concentration: f64,
    /// Mixture weight q of the retrieved concept in the retrieval source.
    #[serde(default = "default_quality")]
    pub retrieval_quality: f64,
    /// Prior over the K concepts; uniform when absent.
    #[serde(default)]
    pub prior: Option<Vec<f64>>,
}

fn default_concentration() -> f64 {
    0.5
}

fn default_quality() -> f64 {
    1.0
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            vocab_size: 6,
            state_count: 4,
            concept_count: 4,
            c1: 0.02,
            c2: 0.05,
            c3: 0.15,
            concentration: default_concentration(),
            retrieval_quality: default_quality(),
            prior: None,
        }
    }
}

impl WorldConfig {
    pub fn with_quality(&self, q: f64) -> Self {
        Self {
            retrieval_quality: q,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 || self.state_count < 3 || self.concept_count < 2 {
            return Err(Error::Constraint(format!(
                "need V >= 3, S >= 3, K >= 2 (got V={}, S={}, K={})",
                self.vocab_size, self.state_count, self.concept_count
            )));
        }
        if !(self.c1 > 0.0) || self.c1 * self.vocab_size as f64 > 1.0 {
            return Err(Error::Constraint(format!(
                "emission floor c1 = {} infeasible for V = {} (need 0 < c1 <= 1/V)",
                self.c1, self.vocab_size
            )));
        }
        if !(0.0..=1.0).contains(&self.c2) || !(0.0..=1.0).contains(&self.c3) || self.c2 > self.c3
        {
            return Err(Error::Constraint(format!(
                "need 0 <= c2 <= c3 <= 1 (got c2={}, c3={})",
                self.c2, self.c3
            )));
        }
        if !(0.0..=1.0).contains(&self.retrieval_quality) {
            return Err(Error::Constraint(format!(
                "retrieval quality {} outside [0, 1]",
                self.retrieval_quality
            )));
        }
        if !(self.concentration > 0.0) || !self.concentration.is_finite() {
            return Err(Error::Constraint("concentration must be positive".into()));
        }
        if let Some(prior) = &self.prior {
            if prior.len() != self.concept_count {
                return Err(Error::Shape {
                    left: prior.len(),
                    right: self.concept_count,
                });
            }
            ProbVector::new(prior.clone())?;
        }
        Ok(())
    }
}

/// One concept: a full HMM over S states and V tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptModel {
    pub transition: Vec<Vec<f64>>,
    pub emission: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
}

/// The delimiter-free process used to generate passages: transitions into
/// the delimiter state and emissions of the delimiter token are removed and
/// the rows renormalized.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PassageProcess {
    pub transition: Vec<Vec<f64>>,
    pub emission: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
}

impl PassageProcess {
    fn from_concept(c: &ConceptModel) -> Result<Self> {
        let s = c.initial.len() - 1;
        let v = c.emission[0].len() - 1;
        let renorm = |row: &[f64]| -> Result<Vec<f64>> {
            let sum: f64 = row.iter().sum();
            if !(sum > 0.0) {
                return Err(Error::Constraint(
                    "row has no mass outside the delimiter".into(),
                ));
            }
            Ok(row.iter().map(|x| x / sum).collect())
        };
        Ok(Self {
            transition: c.transition[..s]
                .iter()
                .map(|r| renorm(&r[..s]))
                .collect::<Result<_>>()?,
            emission: c.emission[..s]
                .iter()
                .map(|r| renorm(&r[..v]))
                .collect::<Result<_>>()?,
            initial: renorm(&c.initial[..s])?,
        })
    }

    #[cfg(test)]
    pub fn sequence_probability(&self, tokens: &[TokenId]) -> f64 {
        let Some((&first, rest)) = tokens.split_first() else {
            return 1.0;
        };
        let mut alpha: Vec<f64> = self
            .initial
            .iter()
            .zip(&self.emission)
            .map(|(p, e)| p * e[first as usize])
            .collect();
        for &t in rest {
            alpha = self.step(&alpha, t);
        }
        alpha.iter().sum()
    }

    pub fn step(&self, alpha: &[f64], token: TokenId) -> Vec<f64> {
        let s = alpha.len();
        (0..s)
            .map(|j| {
                let into: f64 = (0..s).map(|i| alpha[i] * self.transition[i][j]).sum();
                into * self.emission[j][token as usize]
            })
            .collect()
    }

    pub fn sample(&self, length: usize, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(length);
        if length == 0 {
            return out;
        }
        let mut state = sample_index(&self.initial, rng);
        for i in 0..length {
            out.push(sample_index(&self.emission[state], rng) as TokenId);
            if i + 1 < length {
                state = sample_index(&self.transition[state], rng);
            }
        }
        out
    }
}

pub(crate) fn sample_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random::<f64>() * weights.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
        }
        acc += w;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Bounds from the modelling assumptions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

/// A finite family of latent-concept HMMs plus the retrieval source.
///
/// The model mixes over `concepts` with `prior`. Retrieved passages come
/// from `q · HMM(z*) + (1 - q) · HMM(noise)`, where the noise concept is
/// not among the model's concepts; it is addressed as index `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmWorld {
    vocab_size: usize,
    state_count: usize,
    concepts: Vec<ConceptModel>,
    noise: ConceptModel,
    prior: ProbVector,
    star_index: usize,
    retrieval_quality: f64,
    bounds: Bounds,
    passage: Vec<PassageProcess>,
}

impl HmmWorld {
    /// Builds a world from explicit parts and checks every invariant.
    pub fn from_parts(
        concepts: Vec<ConceptModel>,
        noise: ConceptModel,
        prior: ProbVector,
        star_index: usize,
        retrieval_quality: f64,
        bounds: Bounds,
    ) -> Result<Self> {
        let first = concepts
            .first()
            .ok_or_else(|| Error::Constraint("world needs at least one concept".into()))?;
        let state_count = first.initial.len();
        let vocab_size = first.emission.first().map_or(0, Vec::len);
        if state_count < 2 || vocab_size < 2 {
            return Err(Error::Constraint("need S >= 2 and V >= 2".into()));
        }
        if prior.len() != concepts.len() {
            return Err(Error::Shape {
                left: prior.len(),
                right: concepts.len(),
            });
        }
        if star_index >= concepts.len() {
            return Err(Error::Range(format!(
                "star index {star_index} outside 0..{}",
                concepts.len()
            )));
        }
        if !(0.0..=1.0).contains(&retrieval_quality) {
            return Err(Error::Constraint(format!(
                "retrieval quality {retrieval_quality} outside [0, 1]"
            )));
        }
        for (k, c) in concepts.iter().chain(std::iter::once(&noise)).enumerate() {
            validate_concept(c, state_count, vocab_size, &bounds)
                .map_err(|e| Error::Constraint(format!("concept {k}: {e}")))?;
        }
        let passage = concepts
            .iter()
            .chain(std::iter::once(&noise))
            .map(PassageProcess::from_concept)
            .collect::<Result<_>>()?;
        Ok(Self {
            vocab_size,
            state_count,
            concepts,
            noise,
            prior,
            star_index,
            retrieval_quality,
            bounds,
            passage,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn concept_count(&self) -> usize {
        self.concepts.len()
    }

    pub fn concepts(&self) -> &[ConceptModel] {
        &self.concepts
    }

    /// Concept by index; index `K` is the retrieval noise concept.
    pub fn concept(&self, index: usize) -> Option<&ConceptModel> {
        if index == self.concepts.len() {
            Some(&self.noise)
        } else {
            self.concepts.get(index)
        }
    }

    pub fn noise_concept(&self) -> &ConceptModel {
        &self.noise
    }

    pub fn noise_index(&self) -> usize {
        self.concepts.len()
    }

    pub fn prior(&self) -> &ProbVector {
        &self.prior
    }

    pub fn star_index(&self) -> usize {
        self.star_index
    }

    pub fn retrieval_quality(&self) -> f64 {
        self.retrieval_quality
    }

    pub fn bounds(&self) -> Bounds {
        self.bounds
    }

    pub fn delimiter_token(&self) -> TokenId {
        (self.vocab_size - 1) as TokenId
    }

    pub fn delimiter_state(&self) -> usize {
        self.state_count - 1
    }

    /// Same world with a different retrieval mixture weight.
    pub fn with_retrieval_quality(&self, q: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::Constraint(format!(
                "retrieval quality {q} outside [0, 1]"
            )));
        }
        Ok(Self {
            retrieval_quality: q,
            ..self.clone()
        })
    }

    pub(crate) fn passage_process(&self, index: usize) -> &PassageProcess {
        &self.passage[index]
    }

    /// Samples one delimiter-free sequence from concept `index`.
    pub fn sample_sequence(&self, index: usize, length: usize, seed: u64) -> Result<Vec<TokenId>> {
        if index > self.concepts.len() {
            return Err(Error::Range(format!("concept index {index}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self.passage[index].sample(length, &mut rng))
    }
}

fn validate_concept(c: &ConceptModel, s: usize, v: usize, b: &Bounds) -> std::result::Result<(), String> {
    if c.transition.len() != s || c.emission.len() != s || c.initial.len() != s {
        return Err("inconsistent state dimension".into());
    }
    let hd = s - 1;
    let d = v - 1;
    let row_ok = |row: &[f64]| {
        row.iter().all(|x| x.is_finite() && *x >= 0.0)
            && (row.iter().sum::<f64>() - 1.0).abs() <= ROW_TOLERANCE
    };
    if !row_ok(&c.initial) {
        return Err("initial distribution not stochastic".into());
    }
    for (h, row) in c.transition.iter().enumerate() {
        if row.len() != s || !row_ok(row) {
            return Err(format!("transition row {h} not stochastic"));
        }
        let into_delim = row[hd];
        if into_delim < b.c2 || into_delim > b.c3 {
            return Err(format!(
                "transition {h} -> delimiter = {into_delim} outside [{}, {}]",
                b.c2, b.c3
            ));
        }
    }
    for (h, row) in c.emission.iter().enumerate() {
        if row.len() != v || !row_ok(row) {
            return Err(format!("emission row {h} not stochastic"));
        }
        if h == hd {
            if row[d] != 1.0 {
                return Err("delimiter state must emit the delimiter with probability 1".into());
            }
        } else if let Some(x) = row.iter().position(|&p| p < b.c1) {
            return Err(format!(
                "emission p({x} | {h}) = {} below c1 = {}",
                row[x], b.c1
            ));
        }
    }
    Ok(())
}

fn dirichlet(len: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).ok()?;
    let draws: Vec<f64> = (0..len).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return None;
    }
    Some(draws.into_iter().map(|x| x / sum).collect())
}

fn sample_concept(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Option<ConceptModel> {
    let (s, v) = (cfg.state_count, cfg.vocab_size);
    let hd = s - 1;
    let mut transition = Vec::with_capacity(s);
    for _ in 0..s {
        let into_delim = if cfg.c2 == cfg.c3 {
            cfg.c2
        } else {
            rng.random_range(cfg.c2..=cfg.c3)
        };
        if into_delim >= 1.0 {
            return None;
        }
        let mut row: Vec<f64> = dirichlet(s - 1, cfg.concentration, rng)?
            .into_iter()
            .map(|x| x * (1.0 - into_delim))
            .collect();
        row.push(into_delim);
        transition.push(row);
    }
    let free = 1.0 - cfg.c1 * v as f64;
    let mut emission = Vec::with_capacity(s);
    for _ in 0..hd {
        let row = dirichlet(v, cfg.concentration, rng)?
            .into_iter()
            .map(|x| cfg.c1 + free * x)
            .collect();
        emission.push(row);
    }
    let mut delim_row = vec![0.0; v];
    delim_row[v - 1] = 1.0;
    emission.push(delim_row);
    // A sequence starts as if a delimiter had just been emitted.
    let initial = transition[hd].clone();
    Some(ConceptModel {
        transition,
        emission,
        initial,
    })
}

/// Deterministically samples a world satisfying every modelling assumption.
///
/// The seed fixes the concepts; `retrieval_quality` does not consume
/// randomness, so sweeping q over one seed keeps the concepts fixed.
pub fn sample_world(config: &WorldConfig, seed: u64) -> Result<HmmWorld> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = Bounds {
        c1: config.c1,
        c2: config.c2,
        c3: config.c3,
    };
    let prior = match &config.prior {
        Some(p) => ProbVector::new(p.clone())?,
        None => ProbVector::uniform(config.concept_count)?,
    };
    let mut last_err = None;
    for _ in 0..MAX_ATTEMPTS {
        let sampled: Option<Vec<ConceptModel>> = (0..=config.concept_count)
            .map(|_| sample_concept(config, &mut rng))
            .collect();
        let Some(mut concepts) = sampled else {
            continue;
        };
        let noise = concepts.pop().expect("K + 1 concepts sampled");
        match HmmWorld::from_parts(
            concepts,
            noise,
            prior.clone(),
            0,
            config.retrieval_quality,
            bounds,
        ) {
            Ok(world) => return Ok(world),
            Err(e) => last_err = Some(e),
        }
    }
    Err(Error::Constraint(format!(
        "no valid world after {MAX_ATTEMPTS} attempts for seed {seed}{}",
        last_err.map(|e| format!(": {e}")).unwrap_or_default()
    )))
}

/// Samples `n` passages of `length` tokens from the retrieval mixture.
pub fn sample_passages(world: &HmmWorld, n: usize, length: usize, seed: u64) -> Result<RetrievedList> {
    if n == 0 || length == 0 {
        return Err(Error::InvalidInput(
            "need at least one passage of at least one token".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = world.retrieval_quality();
    let passages = (0..n)
        .map(|_| {
            let source = if rng.random::<f64>() < q {
                world.star_index()
            } else {
                world.noise_index()
            };
            world.passage_process(source).sample(length, &mut rng)
        })
        .collect();
    RetrievedList::new(passages, world.delimiter_token())
}
