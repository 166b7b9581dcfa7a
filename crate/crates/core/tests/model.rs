use lamol_core::model::{LanguageModel, ModelConfig, TOKEN_EMBEDDING};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 16;

fn model() -> LanguageModel {
    let cfg = ModelConfig {
        max_len: 16,
        ..ModelConfig::new(VOCAB)
    };
    LanguageModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 100,
        rng_seed: RngSeed::Fixed(11),
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn suffix_changes_never_reach_earlier_positions(
        prefix in prop::collection::vec(0..VOCAB, 1..8),
        a in prop::collection::vec(0..VOCAB, 1..8),
        b in prop::collection::vec(0..VOCAB, 1..8),
    ) {
        let m = model();
        let n = a.len().min(b.len());
        let x: Vec<usize> = prefix.iter().chain(&a[..n]).copied().collect();
        let y: Vec<usize> = prefix.iter().chain(&b[..n]).copied().collect();
        let lx = m.logits(&[x]).unwrap();
        let ly = m.logits(&[y]).unwrap();
        let keep = prefix.len() * VOCAB;
        prop_assert_eq!(&lx.data()[..keep], &ly.data()[..keep]);
    }
}

#[test]
fn output_head_reads_the_token_embedding() {
    let mut m = model();
    assert!(!m.names().iter().any(|n| n.contains("head")));
    let dim = m.params()[TOKEN_EMBEDDING].cols();
    let row = 9;
    m.params_mut()[TOKEN_EMBEDDING].data_mut()[row * dim..(row + 1) * dim].fill(0.0);
    let logits = m.logits(&[vec![1usize, 5, 7, 2]]).unwrap();
    for pos in logits.data().chunks(VOCAB) {
        assert_eq!(pos[row], 0.0);
        assert!(pos.iter().any(|&v| v != 0.0));
    }
}
