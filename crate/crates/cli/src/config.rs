use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tokrag_core::eval::OracleSuiteConfig;
use tokrag_core::hmm::{SweepConfig, WorldConfig};
use tokrag_core::lm::ModelConfig;
use tokrag_core::probe::DEFAULT_THRESHOLD;
use tokrag_core::retriever::DEFAULT_TOP_K;

use crate::CliError;

/// Everything a run depends on. Flags override fields, fields override
/// defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub q_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub passages: usize,
    pub passage_length: usize,
    pub prefix_length: usize,
    pub model: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub probe_threshold: f64,
    pub max_tokens: usize,
    pub top_k: usize,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub model_config: ModelConfig,
    pub truncation_cap: Option<usize>,
    pub consistency_runs: usize,
    pub temperature: f64,
    pub suite: OracleSuiteConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sweep = SweepConfig::default();
        Self {
            world: sweep.world,
            q_grid: sweep.q_grid,
            seeds: sweep.seeds,
            passages: sweep.passages,
            passage_length: sweep.passage_length,
            prefix_length: sweep.prefix_length,
            model: None,
            vocab: None,
            index: None,
            probe_threshold: DEFAULT_THRESHOLD,
            max_tokens: 16,
            top_k: DEFAULT_TOP_K,
            out: None,
            seed: 0,
            model_config: ModelConfig::default(),
            truncation_cap: Some(8),
            consistency_runs: 10,
            temperature: 1.0,
            suite: OracleSuiteConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn sweep(&self) -> SweepConfig {
        SweepConfig {
            world: self.world.clone(),
            seeds: self.seeds.clone(),
            q_grid: self.q_grid.clone(),
            passages: self.passages,
            passage_length: self.passage_length,
            prefix_length: self.prefix_length,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: tokrag_core::Error| CliError::Config(e.to_string());
        self.sweep().validate().map_err(bad)?;
        self.world.with_quality(self.world.retrieval_quality).validate().map_err(bad)?;
        if !(0.0..=1.0).contains(&self.world.retrieval_quality) {
            return Err(CliError::Config(format!(
                "retrieval_quality {} outside [0, 1]",
                self.world.retrieval_quality
            )));
        }
        self.model_config.validate().map_err(bad)?;
        for path in [&self.model, &self.vocab, &self.index].into_iter().flatten() {
            if !path.exists() {
                return Err(CliError::Config(format!("{} does not exist", path.display())));
            }
        }
        if !(self.probe_threshold >= 0.0) || !self.probe_threshold.is_finite() {
            return Err(CliError::Config(format!("probe threshold {}", self.probe_threshold)));
        }
        if self.top_k == 0 {
            return Err(CliError::Config("top_k must be positive".into()));
        }
        if !(self.temperature > 0.0) || self.consistency_runs < 2 {
            return Err(CliError::Config(
                "consistency needs a positive temperature and at least two runs".into(),
            ));
        }
        if self.suite.qualities.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return Err(CliError::Config("suite quality outside [0, 1]".into()));
        }
        Ok(())
    }

    /// SHA-256 of the config with the output location cleared.
    pub fn hash(&self) -> String {
        let keyed = Self {
            out: None,
            ..self.clone()
        };
        let json = serde_json::to_string(&keyed).expect("config serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Serialize)]
pub struct Stamp<'a> {
    pub command: &'a str,
    pub config_hash: String,
    pub seed: u64,
    pub version: &'static str,
}

impl<'a> Stamp<'a> {
    pub fn new(command: &'a str, config: &RunConfig) -> Self {
        Self {
            command,
            config_hash: config.hash(),
            seed: config.seed,
            version: env!("CARGO_PKG_VERSION"),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stamp serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_validates_and_hash_is_stable() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.hash(), RunConfig::default().hash());
        let mut d = c.clone();
        d.seed = 1;
        assert_ne!(c.hash(), d.hash());
        d.seed = 0;
        d.out = Some("elsewhere".into());
        assert_eq!(c.hash(), d.hash());
    }

    #[test]
    fn rejects_bad_ranges() {
        let mut c = RunConfig::default();
        c.q_grid = vec![1.5];
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
        let mut c = RunConfig::default();
        c.world.c2 = 0.5;
        c.world.c3 = 0.1;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.model = Some("/no/such/file".into());
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_fields_are_config_errors() {
        assert!(serde_json::from_str::<RunConfig>("{\"sedes\": [1]}").is_err());
        let c: RunConfig = serde_json::from_str("{\"seed\": 4}").unwrap();
        assert_eq!(c.seed, 4);
    }
}
