use proptest::prelude::*;

use tokrag_core::lm::{decode, encode, load_weights, save_weights, ModelConfig, ModelWeights, TokenizerVocab};
use tokrag_core::{Error, LanguageModel, TokenId};

fn config() -> ModelConfig {
    ModelConfig {
        layers: 3,
        d_model: 12,
        heads: 3,
        head_dim: 4,
        vocab_size: 20,
        context: 32,
    }
}

#[test]
fn weight_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tlm");
    let m = ModelWeights::random(config(), 42).unwrap();
    save_weights(&m, &path).unwrap();
    assert_eq!(load_weights(&path).unwrap(), m);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"TLM1");
    assert_eq!(encode(&m).unwrap(), bytes);
}

#[test]
fn corrupt_files_report_offsets() {
    let bytes = encode(&ModelWeights::random(config(), 1).unwrap()).unwrap();
    let mut flipped = bytes.clone();
    flipped[40] ^= 0xff;
    assert!(matches!(decode(&flipped), Err(Error::Format { .. })));
    let Err(Error::Format { offset, .. }) = decode(&bytes[..bytes.len() / 2]) else {
        panic!("truncated file accepted");
    };
    assert!(offset <= (bytes.len() / 2) as u64);
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode(&magic), Err(Error::Format { offset: 0, .. })));
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_weights(&dir.path().join("absent")), Err(Error::Io { .. })));
}

#[test]
fn model_distribution_matches_trace() {
    let m = ModelWeights::random(config(), 3).unwrap();
    let ids = [4, 5, 6, 7];
    let trace = m.forward_trace(&ids).unwrap();
    let direct = m.next_distribution(&ids).unwrap();
    assert_eq!(direct, trace.final_logits.softmax());
    let lens = m.logit_lens(&trace.hidden[3][3]).unwrap();
    for (a, b) in lens.as_slice().iter().zip(direct.as_slice()) {
        assert!((a - b).abs() <= 1e-10);
    }
    assert_eq!(trace.hidden.len(), 4);
    assert_eq!(trace.attention.len(), 3);
}

#[test]
fn vocabulary_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.txt");
    let v = TokenizerVocab::build(["Paris is the capital.", "The capital is Paris!"], 50).unwrap();
    v.save(&path).unwrap();
    let back = TokenizerVocab::load(&path).unwrap();
    assert_eq!(back, v);
    assert_eq!(back.tokenize("unseen Paris"), vec![back.unk(), back.id("paris").unwrap()]);
    let ids = back.tokenize("[Retrieved Passage] the capital");
    assert_eq!(ids[0], back.delimiter());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn future_tokens_do_not_affect_the_past(
        ids in prop::collection::vec(0u32..20, 2..20),
        cut_frac in 0.0f64..1.0,
        seed in 0u64..4,
    ) {
        let m = ModelWeights::random(config(), seed).unwrap();
        let cut = 1 + ((ids.len() - 1) as f64 * cut_frac) as usize;
        let mut other: Vec<TokenId> = ids.clone();
        other[cut..].reverse();
        for t in other[cut..].iter_mut() {
            *t = (*t + 7) % 20;
        }
        let a = m.forward_trace(&ids).unwrap();
        let b = m.forward_trace(&other).unwrap();
        for layer in 0..a.hidden.len() {
            for t in 0..cut {
                prop_assert_eq!(&a.hidden[layer][t], &b.hidden[layer][t]);
            }
        }
    }
}
