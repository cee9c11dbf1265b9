use tokrag_core::decoder::ModelHandle;
use tokrag_core::eval::{build_dataset, EvalItem};
use tokrag_core::hmm::{
    benefit_detriment, benefit_profile, check_distance_bounds, check_decision_rule, concept_posterior, predictive_llm,
    predictive_rag, predictive_retrieval, sample_passages, sample_world, sequence_log_likelihood, Bounds,
    ConceptModel, HmmWorld, WorldConfig, DEFAULT_ENUMERATION_CAP,
};
use tokrag_core::numerics::l1_distance;
use tokrag_core::{ProbVector, RetrievedList};

const A: u32 = 0;
const B: u32 = 1;

/// States h1, h2, h^d over tokens a, b, d. `delim` is the probability of
/// moving into h^d from any state.
fn chain(next: [usize; 2], delim: f64) -> ConceptModel {
    let stay = 1.0 - delim;
    let mut transition = vec![vec![0.0; 3]; 3];
    for (h, &n) in next.iter().enumerate() {
        transition[h][n] = stay;
        transition[h][2] = delim;
    }
    transition[2][0] = stay;
    transition[2][2] = delim;
    ConceptModel {
        initial: transition[2].clone(),
        transition,
        emission: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
    }
}

fn world(concepts: Vec<ConceptModel>, noise: ConceptModel, prior: &[f64], delim: f64) -> HmmWorld {
    HmmWorld::from_parts(
        concepts,
        noise,
        ProbVector::new(prior.to_vec()).unwrap(),
        0,
        1.0,
        Bounds {
            c1: 0.0,
            c2: delim,
            c3: delim,
        },
    )
    .unwrap()
}

#[test]
fn deterministic_chain_likelihoods() {
    let alternating = chain([1, 0], 0.0);
    let w = world(vec![alternating.clone()], alternating, &[1.0], 0.0);
    assert_eq!(sequence_log_likelihood(&w, 0, &[A, B]).unwrap(), 0.0);
    assert_eq!(sequence_log_likelihood(&w, 0, &[A, A]).unwrap(), f64::NEG_INFINITY);
    assert_eq!(sequence_log_likelihood(&w, 0, &[]).unwrap(), 0.0);
    assert!(sequence_log_likelihood(&w, 0, &[7]).is_err());
    assert_eq!(predictive_llm(&w, &[A]).unwrap().get(B as usize), 1.0);
}

#[test]
fn single_concept_has_no_fusion_term() {
    let c = chain([1, 0], 0.1);
    let w = world(vec![c.clone()], chain([0, 1], 0.1), &[1.0], 0.1);
    let r = RetrievedList::new(vec![vec![A, B], vec![A]], 2).unwrap();
    assert_eq!(concept_posterior(&w, &r, &[A]).unwrap().as_slice(), &[1.0]);
    let rag = predictive_rag(&w, &r, &[A]).unwrap();
    assert!(rag.phi.iter().all(|&x| x == 0.0));
    assert!(l1_distance(&rag.distribution, &predictive_llm(&w, &[A]).unwrap()).unwrap() < 1e-12);
    assert!(sample_world(&WorldConfig { concept_count: 1, ..WorldConfig::default() }, 0).is_err());
}

#[test]
fn identical_concepts_are_redundant() {
    let c = chain([1, 0], 0.2);
    let single = world(vec![c.clone()], c.clone(), &[1.0], 0.2);
    let twin = world(vec![c.clone(), c.clone()], c, &[0.5, 0.5], 0.2);
    let r = RetrievedList::new(vec![vec![A, B, A]], 2).unwrap();
    let post = concept_posterior(&twin, &r, &[A]).unwrap();
    assert!((post.get(0) - 0.5).abs() < 1e-12);
    let a = predictive_llm(&single, &[A]).unwrap();
    let b = predictive_llm(&twin, &[A]).unwrap();
    assert!(l1_distance(&a, &b).unwrap() < 1e-12);
}

#[test]
fn more_faithful_passages_concentrate_the_posterior() {
    let config = WorldConfig::default().with_quality(1.0);
    let mut mean_star = [0.0; 4];
    let mut mean_phi = [0.0; 4];
    let seeds = 30;
    for seed in 0..seeds {
        let w = sample_world(&config, seed).unwrap();
        for (slot, n) in [1, 2, 4, 8].into_iter().enumerate() {
            let r = sample_passages(&w, n, 3, 100 + seed).unwrap();
            let rag = predictive_rag(&w, &r, &[]).unwrap();
            mean_star[slot] += rag.star_posterior / seeds as f64;
            mean_phi[slot] += rag.phi.iter().sum::<f64>() / seeds as f64;
        }
    }
    assert!(mean_star.windows(2).all(|w| w[0] < w[1]), "{mean_star:?}");
    assert!(mean_phi.windows(2).all(|w| w[0] > w[1]), "{mean_phi:?}");
}

#[test]
fn benefit_and_detriment_identities() {
    let w = sample_world(&WorldConfig::default().with_quality(1.0), 3).unwrap();
    let (omega, upsilon) = benefit_detriment(&w, w.star_index(), 3).unwrap();
    assert!(upsilon.abs() < 1e-12);
    assert_eq!(omega, upsilon);
    let noisy = w.with_retrieval_quality(0.3).unwrap();
    for z in 0..noisy.concept_count() {
        let (o, u) = benefit_detriment(&noisy, z, 3).unwrap();
        assert!(o >= 0.0 && u > 0.0);
    }
    let big = sample_world(
        &WorldConfig {
            vocab_size: 8,
            ..WorldConfig::default()
        },
        1,
    )
    .unwrap();
    assert!(benefit_profile(&big, 7, DEFAULT_ENUMERATION_CAP).is_err());
}

#[test]
fn expected_log_ratio_is_linear_in_quality() {
    let w = sample_world(&WorldConfig::default(), 8).unwrap();
    let gap = |q: f64| {
        let p = benefit_profile(&w.with_retrieval_quality(q).unwrap(), 3, DEFAULT_ENUMERATION_CAP).unwrap();
        p.omegas.iter().map(|o| o - p.upsilon).collect::<Vec<_>>()
    };
    let (lo, mid, hi) = (gap(0.0), gap(0.4), gap(1.0));
    for z in 0..lo.len() {
        let interpolated = 0.6 * lo[z] + 0.4 * hi[z];
        assert!((mid[z] - interpolated).abs() < 1e-9, "concept {z}");
    }
}

#[test]
fn perfect_retrieval_collapses_the_kl_bound() {
    let w = sample_world(&WorldConfig::default().with_quality(1.0), 12).unwrap();
    let r = sample_passages(&w, 6, 3, 2).unwrap();
    let rec = check_distance_bounds(&w, &r, &[0], 3).unwrap();
    assert!(rec.detriment.abs() < 1e-12);
    let p_r = predictive_retrieval(&w, &[0]).unwrap();
    let rag = predictive_rag(&w, &r, &[0]).unwrap();
    assert!((l1_distance(&rag.distribution, &p_r).unwrap() - rec.d).abs() < 1e-12);
    assert_eq!(check_decision_rule(&w, &r, &[0], 3, 0).unwrap().ground_truth, 0);
    assert!(check_decision_rule(&w, &r, &[0], 3, 9).is_err());
}

#[test]
fn retrieval_corrects_the_model_once() {
    let star = chain([1, 0], 0.2);
    let other = chain([0, 1], 0.2);
    let w = world(vec![star, other.clone()], other, &[0.4, 0.6], 0.2);
    let item = EvalItem {
        retrieved: RetrievedList::new(vec![vec![A, B]], 2).unwrap(),
        sentence: vec![A, B],
    };
    let samples = build_dataset(ModelHandle::Oracle(&w), &[item], None, 0).unwrap();
    assert_eq!(samples.len(), 1);
    let s = &samples[0];
    assert_eq!((s.label, s.token_llm, s.token_rag, s.gold), (1, A, B, B));
}
