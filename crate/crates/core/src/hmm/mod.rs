//! Latent-concept HMM worlds where every quantity of the benefit/detriment
//! theory is exactly computable.

mod inference;
mod theory;
mod world;

pub use inference::{
    concept_posterior, concept_posterior_given, concept_predictive, predictive_llm,
    predictive_rag, predictive_retrieval, sequence_likelihood, sequence_log_likelihood,
    RagPrediction,
};
pub use theory::{
    benefit_detriment, benefit_profile, check_distance_bounds, check_decision_rule, correlation_pairs,
    error_envelope, run_sweep, summarize, sweep_case, sweep_csv, sweep_correlation,
    BenefitProfile, CorrelationSweep, SweepCase, SweepConfig, SweepRow, SweepSummary,
    BoundCheckRecord, DEFAULT_ENUMERATION_CAP, INVERSE_FLOOR, SWEEP_CSV_HEADER,
};
pub use world::{sample_passages, sample_world, Bounds, ConceptModel, HmmWorld, WorldConfig};
