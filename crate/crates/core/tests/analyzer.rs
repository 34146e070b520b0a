use proptest::prelude::*;

use seqkv::analyzer::residual::{verify_residual_bounds, BoundCheck};
use seqkv::analyzer::{
    conditional_entropies, running_mean, verify_duality, verify_injectivity,
    verify_sequential_bound,
};
use seqkv::model::{lipschitz_estimate, Model, ModelConfig};

fn small(seed: u64) -> Model {
    Model::build(ModelConfig {
        vocab_size: 3,
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn running_mean_of_non_increasing_is_non_increasing(
        mut xs in prop::collection::vec(0.0f64..10.0, 1..100),
    ) {
        xs.sort_by(|a, b| b.total_cmp(a));
        let m = running_mean(&xs);
        prop_assert_eq!(m[0], xs[0]);
        prop_assert!(m.windows(2).all(|w| w[1] <= w[0]));
        let plain = xs.iter().sum::<f64>() / xs.len() as f64;
        prop_assert!((m[m.len() - 1] - plain).abs() <= 1e-9);
    }

    #[test]
    fn kv_entropy_matches_token_entropy_across_seeds(seed in any::<u64>()) {
        let m = small(seed);
        let r = verify_sequential_bound(&m, 4).unwrap();
        prop_assert!(r.injective());
        prop_assert!(r.max_gap() <= 1e-9);
        prop_assert!(verify_injectivity(&m, 3).unwrap().holds());
    }

    #[test]
    fn residual_chain_holds_with_realized_lipschitz(seed in any::<u64>()) {
        // E‖R‖ ≤ √Var[F] ≤ L·√Var[E] and Var[E] = ½ Σ p_a p_b ‖E_a − E_b‖² ≤ ½ C_E² (1 − Σ p²),
        // where L is the largest realized ‖ΔKV‖ / ‖ΔE‖ over the same contexts.
        let m = small(seed);
        let c_e = m.embedding_diameter();
        let lip = lipschitz_estimate(&m, 3).unwrap().full_kv_ratio;
        let r = verify_residual_bounds(&m, 3).unwrap();
        for c in &r.contexts {
            let probs = m.state_for(&c.context).unwrap().next_dist().probs().to_vec();
            let collision: f64 = probs.iter().map(|p| p * p).sum();
            prop_assert!(c.embedding_variance <= 0.5 * c_e * c_e * (1.0 - collision) + 1e-12);
            prop_assert!(c.mean_residual_norm <= c.kv_variance.max(0.0).sqrt() + 1e-12);
            prop_assert!(c.kv_variance <= lip * lip * c.embedding_variance + 1e-9);
        }
        for check in [BoundCheck::SecondMoment, BoundCheck::EntropyCoupling] {
            prop_assert!(r.summary(check).all_pass(), "{:?}", check);
        }
    }
}

#[test]
fn conditional_entropies_sum_to_sequence_entropy() {
    let m = small(1);
    let h = conditional_entropies(&m, 4).unwrap();
    let r = verify_sequential_bound(&m, 4).unwrap();
    for (i, p) in r.positions.iter().enumerate() {
        assert!((p.token_entropy - h[i]).abs() <= 1e-12);
    }
}

#[test]
fn full_vocabulary_draft_is_always_accepted() {
    let m = small(2);
    let r = verify_duality(&m, 3, 3).unwrap();
    assert!(r.full_vocabulary);
    assert!(r.acceptance_matches());
    assert!(r.max_gap_to_one <= 1e-12);
    let r1 = verify_duality(&m, 1, 3).unwrap();
    assert!(r1.mean_acceptance < 1.0);
    assert!(verify_duality(&m, 0, 3).is_err());
}

#[test]
fn metric_lower_form_holds_and_upper_form_fails() {
    let m = Model::build(ModelConfig::default()).unwrap();
    let r = seqkv::analyzer::verify_metric_inequalities(&m, 2).unwrap();
    assert_eq!(r.sequences, 1 + 8 + 64);
    assert_eq!(r.triples, 73 * 73 * 73);
    assert!(r.lower_holds());
    // d(s, s) = −log2 P(s) exceeds d(s, t) whenever t diverges early.
    assert!(r.upper_violations > 0);
    let [a, b, c] = r.upper_example.unwrap();
    let d = |x: &[u32], y: &[u32]| seqkv::index::trie_metric(&m, x, y).unwrap();
    assert!(d(&a, &c) > d(&a, &b).max(d(&b, &c)));
}

#[test]
fn layer_product_can_underestimate_cache_lipschitz() {
    // The cache concatenates every layer, so ‖ΔKV‖ can exceed κ^L · ‖ΔE‖.
    let m = small(13508815334672736161);
    let l = lipschitz_estimate(&m, 3).unwrap();
    assert!(l.full_kv_ratio > l.kv_lipschitz());
    let r = verify_residual_bounds(&m, 3).unwrap();
    assert_eq!(r.summary(BoundCheck::ResidualNorm).failed, 2);
}
