use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use proptest::prelude::*;

use seqkv::index::{trie_metric, ClusterCriterion, PrefixIndex, SessionId};
use seqkv::model::{Model, ModelConfig, Token, TokenSeq};

fn model() -> Arc<Model> {
    static M: OnceLock<Arc<Model>> = OnceLock::new();
    Arc::clone(M.get_or_init(|| {
        Arc::new(
            Model::build(ModelConfig {
                vocab_size: 4,
                ..ModelConfig::default()
            })
            .unwrap(),
        )
    }))
}

fn sessions() -> impl Strategy<Value = Vec<Vec<Token>>> {
    prop::collection::vec(prop::collection::vec(0..4 as Token, 1..=6), 1..20)
}

fn lcp(a: &[Token], b: &[Token]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

fn build(seqs: &[Vec<Token>]) -> PrefixIndex {
    let mut idx = PrefixIndex::new(model());
    for (id, s) in seqs.iter().enumerate() {
        idx.insert(id as SessionId, TokenSeq(s.clone())).unwrap();
    }
    idx
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn best_match_is_longest_prefix_then_lowest_id(
        seqs in sessions(),
        query in prop::collection::vec(0..4 as Token, 0..=6),
    ) {
        let idx = build(&seqs);
        let m = idx.best_match(&query).unwrap();
        let best = seqs.iter().map(|s| lcp(s, &query)).max().unwrap();
        let id = seqs.iter().position(|s| lcp(s, &query) == best).unwrap() as SessionId;
        prop_assert_eq!(m.session, id);
        prop_assert_eq!(m.shared_prefix_len, best);
        let want = -model().sequence_prob(&query[..best]).unwrap().log2();
        prop_assert!((m.metric - want).abs() <= 1e-9);
    }

    #[test]
    fn evicting_restores_the_smaller_index(seqs in sessions(), extra in prop::collection::vec(0..4 as Token, 1..=6)) {
        let small = build(&seqs);
        let mut big = build(&seqs);
        big.insert(seqs.len() as SessionId, TokenSeq(extra)).unwrap();
        big.evict(seqs.len() as SessionId).unwrap();
        prop_assert_eq!(big.node_count(), small.node_count());
        // Edge weights are a lazily filled cache; compare structure only.
        let shape = |idx: &PrefixIndex| {
            idx.node_views()
                .into_iter()
                .map(|v| (v.prefix, v.prob, v.sessions, v.children))
                .collect::<Vec<_>>()
        };
        prop_assert_eq!(shape(&big), shape(&small));
    }

    #[test]
    fn clusters_partition_and_respect_threshold(seqs in sessions(), threshold in 0.0f64..6.0) {
        let idx = build(&seqs);
        let clusters = idx.cluster(threshold, ClusterCriterion::SharedInformation).unwrap();
        let mut seen = BTreeMap::new();
        for c in &clusters {
            prop_assert_eq!(c.members[0].session, c.centroid);
            let centroid = &seqs[c.centroid as usize];
            let p_c = model().sequence_prob(centroid).unwrap();
            for m in &c.members {
                prop_assert!(seen.insert(m.session, c.id).is_none());
                let s = &seqs[m.session as usize];
                prop_assert_eq!(m.divergence, lcp(s, centroid));
                if m.session != c.centroid {
                    prop_assert!(m.metric >= threshold);
                    // Greedy order: the centroid is at least as probable.
                    prop_assert!(model().sequence_prob(s).unwrap() <= p_c);
                }
            }
        }
        prop_assert_eq!(seen.len(), seqs.len());
    }
}

#[test]
fn empty_index_has_no_match() {
    let idx = PrefixIndex::new(model());
    assert!(idx.best_match(&[1, 2]).is_none());
    assert!(idx.is_empty());
}

#[test]
fn duplicate_ids_are_rejected() {
    let mut idx = PrefixIndex::new(model());
    idx.insert(3, TokenSeq(vec![1, 2])).unwrap();
    assert!(idx.insert(3, TokenSeq(vec![0])).is_err());
    assert!(idx.evict(4).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metric_reverse_ultrametric(
        a in prop::collection::vec(0..4 as Token, 0..=6),
        b in prop::collection::vec(0..4 as Token, 0..=6),
        c in prop::collection::vec(0..4 as Token, 0..=6),
    ) {
        let m = model();
        let d = |x: &[Token], y: &[Token]| trie_metric(&m, x, y).unwrap();
        prop_assert!(d(&a, &c) >= d(&a, &b).min(d(&b, &c)));
    }

    #[test]
    fn metric_ignores_suffixes_after_divergence(
        prefix in prop::collection::vec(0..4 as Token, 0..=3),
        x in 0..4 as Token,
        y in 0..4 as Token,
        tail_a in prop::collection::vec(0..4 as Token, 0..=2),
        tail_b in prop::collection::vec(0..4 as Token, 0..=2),
    ) {
        prop_assume!(x != y);
        let m = model();
        let mut a = prefix.clone();
        a.push(x);
        let mut b = prefix.clone();
        b.push(y);
        let base = trie_metric(&m, &a, &b).unwrap();
        a.extend(&tail_a);
        b.extend(&tail_b);
        prop_assert_eq!(trie_metric(&m, &a, &b).unwrap(), base);
    }

    #[test]
    fn inserted_session_is_its_own_best_match(seqs in sessions(), pick in any::<prop::sample::Index>()) {
        let idx = build(&seqs);
        let i = pick.index(seqs.len());
        let m = idx.best_match(&seqs[i]).unwrap();
        prop_assert_eq!(m.shared_prefix_len, seqs[i].len());
        // Lower ids stored on the same path win the tie.
        let first = seqs.iter().position(|s| s.len() >= seqs[i].len() && s[..seqs[i].len()] == seqs[i][..]).unwrap();
        prop_assert_eq!(m.session, first as SessionId);
    }

    #[test]
    fn evicting_everything_leaves_the_root(seqs in sessions()) {
        let mut idx = build(&seqs);
        for id in 0..seqs.len() {
            idx.evict(id as SessionId).unwrap();
        }
        prop_assert!(idx.is_empty());
        prop_assert_eq!(idx.node_count(), 1);
        prop_assert!(idx.best_match(&[0]).is_none());
    }

    #[test]
    fn clustering_is_deterministic(seqs in sessions(), threshold in 0.0f64..6.0) {
        let a = build(&seqs).cluster(threshold, ClusterCriterion::SharedInformation).unwrap();
        let b = build(&seqs).cluster(threshold, ClusterCriterion::SharedInformation).unwrap();
        prop_assert_eq!(a, b);
    }
}
