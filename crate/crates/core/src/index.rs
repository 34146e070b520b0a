//! Probabilistic language trie over stored session prefixes.
//!
//! Nodes are token prefixes; every node caches its cumulative model
//! probability and the conditional weights of its outgoing edges. Edge
//! weights whose child probability falls below the pruning threshold are not
//! cached, so a node's cached weights may sum to less than one. Structural
//! nodes exist only on paths to stored sessions.
//!
//! The index is `Send + Sync`; readers (`best_match`, `cluster_table`) take
//! `&self` and writers (`insert`, `evict`) take `&mut self`, so wrapping it in
//! an `RwLock` gives the many-readers-or-one-writer contract.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{common_prefix_len, Model, Token, TokenSeq};
use crate::report::Table;

pub type SessionId = u32;

/// Default pruning threshold for cached edge weights.
pub const DEFAULT_EPSILON: f64 = 1e-9;

/// `-log2 p`, with the empty prefix (`p = 1`) mapped to exactly 0.
pub fn bits(p: f64) -> f64 {
    if p >= 1.0 {
        0.0
    } else {
        -p.log2()
    }
}

/// Shared-prefix description length `-log2 P(lcp(s, s2))`.
pub fn trie_metric(model: &Model, s: &[Token], s2: &[Token]) -> Result<f64> {
    model.config().check_tokens(s)?;
    model.config().check_tokens(s2)?;
    let lcp = common_prefix_len(s, s2);
    Ok(bits(model.sequence_prob(&s[..lcp])?))
}

#[derive(Debug, Clone)]
struct Node {
    parent: Option<usize>,
    token: Option<Token>,
    depth: usize,
    prob: f64,
    edges: BTreeMap<Token, f64>,
    children: BTreeMap<Token, usize>,
    sessions: BTreeSet<SessionId>,
}

impl Node {
    fn root() -> Self {
        Node {
            parent: None,
            token: None,
            depth: 0,
            prob: 1.0,
            edges: BTreeMap::new(),
            children: BTreeMap::new(),
            sessions: BTreeSet::new(),
        }
    }
}

/// Result of a best-match lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub session: SessionId,
    pub shared_prefix_len: usize,
    /// `-log2 P(shared prefix)` in bits.
    pub metric: f64,
}

/// Read-only view of one trie node, for inspection and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeView {
    pub prefix: Vec<Token>,
    pub prob: f64,
    pub edge_weights: BTreeMap<Token, f64>,
    pub sessions: Vec<SessionId>,
    pub children: Vec<Token>,
}

/// How pairwise trie distances are compared against the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClusterCriterion {
    /// Members must share at least `δ` bits of prefix information.
    #[default]
    SharedInformation,
    /// Members must satisfy `d_T ≤ δ`.
    AtMostThreshold,
}

impl std::str::FromStr for ClusterCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" | "shared_information" => Ok(Self::SharedInformation),
            "literal" | "at_most" => Ok(Self::AtMostThreshold),
            other => Err(Error::InvalidArgument(format!(
                "unknown cluster criterion {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for ClusterCriterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SharedInformation => "shared",
            Self::AtMostThreshold => "literal",
        })
    }
}

impl ClusterCriterion {
    pub fn admits(self, metric: f64, threshold: f64) -> bool {
        match self {
            Self::SharedInformation => metric >= threshold,
            Self::AtMostThreshold => metric <= threshold,
        }
    }
}

/// One cluster member and its relation to the centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMember {
    pub session: SessionId,
    /// Number of leading tokens shared with the centroid.
    pub divergence: usize,
    /// Trie metric to the centroid in bits.
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterRecord {
    pub id: usize,
    pub centroid: SessionId,
    pub threshold: f64,
    pub criterion: ClusterCriterion,
    /// Members in absorption order; the centroid is first.
    pub members: Vec<ClusterMember>,
}

impl ClusterRecord {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_singleton(&self) -> bool {
        self.members.len() == 1
    }

    pub fn session_ids(&self) -> impl Iterator<Item = SessionId> + '_ {
        self.members.iter().map(|m| m.session)
    }
}

/// The prefix index: trie, pruning threshold, and session registry.
#[derive(Debug, Clone)]
pub struct PrefixIndex {
    model: Arc<Model>,
    nodes: Vec<Option<Node>>,
    free: Vec<usize>,
    epsilon: f64,
    registry: BTreeMap<SessionId, TokenSeq>,
}

const ROOT: usize = 0;

impl PrefixIndex {
    pub fn new(model: Arc<Model>) -> Self {
        Self::with_epsilon(model, DEFAULT_EPSILON)
    }

    pub fn with_epsilon(model: Arc<Model>, epsilon: f64) -> Self {
        Self {
            model,
            nodes: vec![Some(Node::root())],
            free: Vec::new(),
            epsilon,
            registry: BTreeMap::new(),
        }
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn len(&self) -> usize {
        self.registry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.registry.is_empty()
    }

    /// Number of live trie nodes, root included.
    pub fn node_count(&self) -> usize {
        self.nodes.len() - self.free.len()
    }

    pub fn session(&self, id: SessionId) -> Option<&TokenSeq> {
        self.registry.get(&id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = (SessionId, &TokenSeq)> {
        self.registry.iter().map(|(&id, s)| (id, s))
    }

    fn node(&self, idx: usize) -> &Node {
        self.nodes[idx].as_ref().expect("live node")
    }

    fn node_mut(&mut self, idx: usize) -> &mut Node {
        self.nodes[idx].as_mut().expect("live node")
    }

    fn alloc(&mut self, node: Node) -> usize {
        match self.free.pop() {
            Some(idx) => {
                self.nodes[idx] = Some(node);
                idx
            }
            None => {
                self.nodes.push(Some(node));
                self.nodes.len() - 1
            }
        }
    }

    /// Registers `seq` under `id`, creating its path with one decoding step
    /// per token.
    pub fn insert(&mut self, id: SessionId, seq: impl Into<TokenSeq>) -> Result<()> {
        let seq = seq.into();
        if self.registry.contains_key(&id) {
            return Err(Error::DuplicateSession(id));
        }
        self.model.config().check_tokens(&seq)?;
        let model = Arc::clone(&self.model);
        let mut state = model.start();
        let mut cur = ROOT;
        for &t in seq.iter() {
            let dist = state.next_dist();
            let prob = self.node(cur).prob;
            if self.node(cur).edges.is_empty() {
                let eps = self.epsilon;
                let edges = dist
                    .probs()
                    .iter()
                    .enumerate()
                    .filter(|(_, &w)| prob * w >= eps)
                    .map(|(tok, &w)| (tok as Token, w))
                    .collect();
                self.node_mut(cur).edges = edges;
            }
            let weight = dist.prob(t);
            self.node_mut(cur).edges.insert(t, weight);
            cur = match self.node(cur).children.get(&t) {
                Some(&child) => child,
                None => {
                    let depth = self.node(cur).depth + 1;
                    let child = self.alloc(Node {
                        parent: Some(cur),
                        token: Some(t),
                        depth,
                        prob: prob * weight,
                        ..Node::root()
                    });
                    self.node_mut(cur).children.insert(t, child);
                    child
                }
            };
            model.push(&mut state, t);
        }
        self.node_mut(cur).sessions.insert(id);
        self.registry.insert(id, seq);
        Ok(())
    }

    /// Removes session `id` and prunes path nodes no stored session needs.
    pub fn evict(&mut self, id: SessionId) -> Result<()> {
        let seq = self.registry.remove(&id).ok_or(Error::UnknownSession(id))?;
        let mut cur = self.walk(&seq).1;
        self.node_mut(cur).sessions.remove(&id);
        while cur != ROOT {
            let node = self.node(cur);
            if !node.sessions.is_empty() || !node.children.is_empty() {
                break;
            }
            let parent = node.parent.expect("non-root has parent");
            let token = node.token.expect("non-root has token");
            let below_threshold = node.prob < self.epsilon;
            let p = self.node_mut(parent);
            p.children.remove(&token);
            if below_threshold {
                p.edges.remove(&token);
            }
            self.nodes[cur] = None;
            self.free.push(cur);
            cur = parent;
        }
        Ok(())
    }

    /// Follows `query` through stored paths; returns the matched depth and node.
    fn walk(&self, query: &[Token]) -> (usize, usize) {
        let mut cur = ROOT;
        let mut depth = 0;
        for t in query {
            match self.node(cur).children.get(t) {
                Some(&child) => {
                    cur = child;
                    depth += 1;
                }
                None => break,
            }
        }
        (depth, cur)
    }

    fn min_session_below(&self, idx: usize) -> Option<SessionId> {
        let node = self.node(idx);
        let here = node.sessions.iter().next().copied();
        node.children
            .values()
            .filter_map(|&c| self.min_session_below(c))
            .chain(here)
            .min()
    }

    /// The stored session whose common prefix with `query` carries the most
    /// information; ties go to the longer prefix, then the lower id.
    pub fn best_match(&self, query: &[Token]) -> Option<Match> {
        if self.registry.is_empty() {
            return None;
        }
        // -log2 P(prefix) never decreases along a path, so the deepest
        // reachable node wins both the metric and the length tie-break.
        let (depth, node) = self.walk(query);
        let session = self.min_session_below(node)?;
        Some(Match {
            session,
            shared_prefix_len: depth,
            metric: bits(self.node(node).prob),
        })
    }

    /// Cached probability of `seq[..len]`, if that prefix is on a stored path.
    pub fn prefix_prob(&self, seq: &[Token], len: usize) -> Option<f64> {
        let (depth, node) = self.walk(&seq[..len.min(seq.len())]);
        (depth == len).then(|| self.node(node).prob)
    }

    /// Trie metric between two registered sessions.
    pub fn session_metric(&self, a: SessionId, b: SessionId) -> Result<f64> {
        let sa = self.registry.get(&a).ok_or(Error::UnknownSession(a))?;
        let sb = self.registry.get(&b).ok_or(Error::UnknownSession(b))?;
        let lcp = common_prefix_len(sa, sb);
        Ok(bits(self.prefix_prob(sa, lcp).expect("stored path")))
    }

    pub fn node_view(&self, prefix: &[Token]) -> Option<NodeView> {
        let (depth, idx) = self.walk(prefix);
        if depth != prefix.len() {
            return None;
        }
        let node = self.node(idx);
        Some(NodeView {
            prefix: prefix.to_vec(),
            prob: node.prob,
            edge_weights: node.edges.clone(),
            sessions: node.sessions.iter().copied().collect(),
            children: node.children.keys().copied().collect(),
        })
    }

    /// Every live node, depth-first.
    pub fn node_views(&self) -> Vec<NodeView> {
        let mut out = Vec::new();
        let mut stack = vec![(ROOT, Vec::new())];
        while let Some((idx, prefix)) = stack.pop() {
            let node = self.node(idx);
            for (&t, &c) in node.children.iter().rev() {
                let mut p = prefix.clone();
                p.push(t);
                stack.push((c, p));
            }
            out.push(NodeView {
                prefix,
                prob: node.prob,
                edge_weights: node.edges.clone(),
                sessions: node.sessions.iter().copied().collect(),
                children: node.children.keys().copied().collect(),
            });
        }
        out
    }

    /// Greedy clustering of every registered session.
    ///
    /// Sessions are visited by descending probability (ties: lower id). Each
    /// unassigned session seeds a cluster, becomes its centroid, and absorbs
    /// every later unassigned session that meets the criterion against all
    /// current members.
    pub fn cluster(
        &self,
        threshold: f64,
        criterion: ClusterCriterion,
    ) -> Result<Vec<ClusterRecord>> {
        if threshold.is_nan() || threshold < 0.0 {
            return Err(Error::InvalidArgument(
                "cluster threshold must be non-negative".into(),
            ));
        }
        let mut order: Vec<(SessionId, f64)> = self
            .registry
            .iter()
            .map(|(&id, seq)| (id, self.prefix_prob(seq, seq.len()).expect("stored path")))
            .collect();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

        let mut assigned = BTreeSet::new();
        let mut records = Vec::new();
        for (i, &(seed, _)) in order.iter().enumerate() {
            if assigned.contains(&seed) {
                continue;
            }
            assigned.insert(seed);
            let mut members = vec![seed];
            for &(cand, _) in &order[i + 1..] {
                if assigned.contains(&cand) {
                    continue;
                }
                let mut ok = true;
                for &m in &members {
                    if !criterion.admits(self.session_metric(cand, m)?, threshold) {
                        ok = false;
                        break;
                    }
                }
                if ok {
                    assigned.insert(cand);
                    members.push(cand);
                }
            }
            let centroid_seq = &self.registry[&seed];
            let members = members
                .into_iter()
                .map(|s| {
                    let seq = &self.registry[&s];
                    Ok(ClusterMember {
                        session: s,
                        divergence: common_prefix_len(seq, centroid_seq),
                        metric: self.session_metric(s, seed)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            records.push(ClusterRecord {
                id: records.len(),
                centroid: seed,
                threshold,
                criterion,
                members,
            });
        }
        Ok(records)
    }
}

/// Cluster assignments as a table with columns
/// `session_id cluster_id centroid_id divergence_position pairwise_metric_bits`,
/// sorted by session id.
pub fn cluster_table(records: &[ClusterRecord]) -> Table {
    let mut rows: Vec<(SessionId, usize, SessionId, usize, f64)> = records
        .iter()
        .flat_map(|r| {
            r.members
                .iter()
                .map(move |m| (m.session, r.id, r.centroid, m.divergence, m.metric))
        })
        .collect();
    rows.sort_by_key(|r| r.0);
    let mut table = Table::new([
        "session_id",
        "cluster_id",
        "centroid_id",
        "divergence_position",
        "pairwise_metric_bits",
    ]);
    for (s, c, cen, d, m) in rows {
        table.push([
            s.to_string(),
            c.to_string(),
            cen.to_string(),
            d.to_string(),
            format!("{m:.6}"),
        ]);
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Arc<Model> {
        Arc::new(Model::build(ModelConfig::default()).unwrap())
    }

    #[test]
    fn metric_of_identical_is_sequence_surprisal() {
        let m = model();
        let s = [1, 2, 3];
        let p = m.sequence_prob(&s).unwrap();
        assert_eq!(trie_metric(&m, &s, &s).unwrap(), -p.log2());
        assert!(trie_metric(&m, &s, &s).unwrap() > 0.0);
    }

    #[test]
    fn metric_zero_for_disjoint_first_token() {
        let m = model();
        assert_eq!(trie_metric(&m, &[1, 2], &[2, 2]).unwrap(), 0.0);
        assert_eq!(trie_metric(&m, &[], &[2, 2]).unwrap(), 0.0);
    }

    #[test]
    fn empty_index_has_no_match() {
        let idx = PrefixIndex::new(model());
        assert_eq!(idx.best_match(&[1, 2]), None);
    }

    #[test]
    fn insert_then_match_roundtrip() {
        let mut idx = PrefixIndex::new(model());
        idx.insert(7, vec![1, 2, 3]).unwrap();
        idx.insert(3, vec![1, 2, 4]).unwrap();
        let hit = idx.best_match(&[1, 2, 3]).unwrap();
        assert_eq!(hit.session, 7);
        assert_eq!(hit.shared_prefix_len, 3);
        // both share [1, 2]; lowest id wins
        let hit = idx.best_match(&[1, 2, 5]).unwrap();
        assert_eq!((hit.session, hit.shared_prefix_len), (3, 2));
        let hit = idx.best_match(&[6]).unwrap();
        assert_eq!(
            (hit.session, hit.shared_prefix_len, hit.metric),
            (3, 0, 0.0)
        );
    }

    #[test]
    fn duplicate_and_unknown_sessions() {
        let mut idx = PrefixIndex::new(model());
        idx.insert(1, vec![0]).unwrap();
        assert_eq!(idx.insert(1, vec![2]), Err(Error::DuplicateSession(1)));
        assert_eq!(idx.evict(9), Err(Error::UnknownSession(9)));
        assert!(matches!(
            idx.insert(2, vec![9]),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn child_probability_is_parent_times_edge() {
        let mut idx = PrefixIndex::new(model());
        idx.insert(0, vec![3, 1, 4, 1]).unwrap();
        idx.insert(1, vec![3, 1, 5]).unwrap();
        for view in idx.node_views() {
            let total: f64 = view.edge_weights.values().sum();
            assert!(total <= 1.0 + 1e-12);
            for &c in &view.children {
                let mut p = view.prefix.clone();
                p.push(c);
                let child = idx.node_view(&p).unwrap();
                let expect = view.prob * view.edge_weights[&c];
                assert!((child.prob - expect).abs() <= 1e-12 * expect);
            }
        }
    }

    #[test]
    fn pruning_threshold_limits_cached_edges() {
        let mut idx = PrefixIndex::with_epsilon(model(), 0.05);
        idx.insert(0, vec![3, 1, 4, 1, 5, 2]).unwrap();
        for view in idx.node_views() {
            for (&t, &w) in &view.edge_weights {
                let on_path = view.children.contains(&t);
                assert!(on_path || view.prob * w >= 0.05);
            }
        }
    }

    #[test]
    fn evict_removes_paths() {
        let mut idx = PrefixIndex::new(model());
        idx.insert(1, vec![1, 2, 3]).unwrap();
        idx.insert(2, vec![1, 2, 4]).unwrap();
        idx.insert(3, vec![1, 2, 3]).unwrap();
        idx.evict(1).unwrap();
        assert_eq!(idx.best_match(&[1, 2, 3]).unwrap().session, 3);
        idx.evict(3).unwrap();
        assert_eq!(idx.best_match(&[1, 2, 3]).unwrap().session, 2);
        assert!(idx.node_view(&[1, 2, 3]).is_none());
        idx.evict(2).unwrap();
        assert_eq!(idx.node_count(), 1);
        assert_eq!(idx.best_match(&[1]), None);
    }

    #[test]
    fn identical_sessions_form_one_cluster() {
        let mut idx = PrefixIndex::new(model());
        for id in [5, 2, 9] {
            idx.insert(id, vec![4, 4, 1]).unwrap();
        }
        let recs = idx
            .cluster(1.0, ClusterCriterion::SharedInformation)
            .unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].centroid, 2);
        assert!(recs[0].members.iter().all(|m| m.divergence == 3));
    }

    #[test]
    fn threshold_extremes() {
        let mut idx = PrefixIndex::new(model());
        for (id, s) in [(0, vec![1, 2]), (1, vec![3, 4]), (2, vec![1, 5])] {
            idx.insert(id, s).unwrap();
        }
        let all = idx
            .cluster(0.0, ClusterCriterion::SharedInformation)
            .unwrap();
        assert_eq!(all.len(), 1);
        let none = idx
            .cluster(f64::INFINITY, ClusterCriterion::SharedInformation)
            .unwrap();
        assert_eq!(none.len(), 3);
        assert!(idx
            .cluster(-1.0, ClusterCriterion::SharedInformation)
            .is_err());
        let literal = idx.cluster(0.0, ClusterCriterion::AtMostThreshold).unwrap();
        // only pairs with an empty common prefix are within 0 bits
        assert!(literal.iter().all(|r| r
            .members
            .windows(2)
            .all(|w| { idx.session_metric(w[0].session, w[1].session).unwrap() == 0.0 })));
    }
}
