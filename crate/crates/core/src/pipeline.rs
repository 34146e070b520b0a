//! Index, cluster, compress and account for one workload.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::codec::{
    compress_detailed, raw_baseline, raw_container_bits, CodecConfig, Compressed, CompressedCache,
};
use crate::dedup::{layer_savings, storage_report, ClusterStore, LayerSavings, StorageReport};
use crate::error::{Error, Result};
use crate::index::{ClusterCriterion, ClusterRecord, PrefixIndex, SessionId, DEFAULT_EPSILON};
use crate::model::{KvTensor, Model, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterSettings {
    pub threshold: f64,
    pub criterion: ClusterCriterion,
    pub epsilon: f64,
}

impl Default for ClusterSettings {
    fn default() -> Self {
        Self {
            threshold: 8.0,
            criterion: ClusterCriterion::SharedInformation,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompressionRun {
    pub clusters: Vec<ClusterRecord>,
    pub compressed: Compressed,
    /// The serialized container file.
    pub bytes: Vec<u8>,
    /// Serialized size with clustering disabled.
    pub unclustered_bits: u64,
    /// Serialized size of the raw full-precision baseline.
    pub raw_bits: u64,
    pub storage: StorageReport,
    pub savings: LayerSavings,
}

impl CompressionRun {
    pub fn bits(&self) -> u64 {
        8 * self.bytes.len() as u64
    }

    pub fn token_count(&self) -> u64 {
        self.compressed
            .stores
            .iter()
            .map(|s| {
                s.centroid.as_ref().map_or(0, |c| c.tokens.len() as u64)
                    + s.deltas.iter().map(|d| d.len() as u64).sum::<u64>()
            })
            .sum()
    }
}

pub fn build_index(
    model: &Arc<Model>,
    sessions: &BTreeMap<SessionId, TokenSeq>,
    epsilon: f64,
) -> Result<PrefixIndex> {
    let mut index = PrefixIndex::with_epsilon(Arc::clone(model), epsilon);
    for (&id, seq) in sessions {
        index.insert(id, seq.clone())?;
    }
    Ok(index)
}

/// Clusters `sessions`, compresses them, and measures the result against
/// the same codec without clustering and against the raw baseline.
pub fn run_compression(
    model: &Arc<Model>,
    sessions: &BTreeMap<SessionId, TokenSeq>,
    cluster: &ClusterSettings,
    codec: &CodecConfig,
) -> Result<CompressionRun> {
    if sessions.is_empty() {
        return Err(Error::InvalidArgument("no sessions to compress".into()));
    }
    let index = build_index(model, sessions, cluster.epsilon)?;
    let clusters = index.cluster(cluster.threshold, cluster.criterion)?;
    let compressed = compress_detailed(model, sessions, &clusters, codec)?;
    let bytes = compressed.cache.to_bytes()?;
    let bits = 8 * bytes.len() as u64;

    // The resolved config, so every variant echoes identical parameters.
    let config = compressed.config;
    let unclustered = compress_detailed(model, sessions, &[], &config)?;
    let unclustered_bits = 8 * unclustered.cache.to_bytes()?.len() as u64;
    let raw_bits = 8 * raw_baseline(model, sessions, &config)?.to_bytes()?.len() as u64;

    let storage = storage_report(&compressed.stores, bits, unclustered_bits)?;
    let raw_of = |id: SessionId| -> Result<u64> {
        let seq = sessions.get(&id).ok_or(Error::UnknownSession(id))?;
        Ok(raw_container_bits(model, &config, id, seq.len()))
    };
    let savings = layer_savings(model, &compressed.cache.containers, &raw_of, raw_bits, bits)?;
    Ok(CompressionRun {
        clusters,
        compressed,
        bytes,
        unclustered_bits,
        raw_bits,
        storage,
        savings,
    })
}

/// Reconstruction error of every decoded session against a direct forward
/// pass, and the codec guarantee at each position.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundtripReport {
    pub sessions: usize,
    pub positions: usize,
    /// Largest per-component `|decoded − direct|`.
    pub max_abs_error: f64,
    /// Smallest `bound − error` over positions; prefix and centroid
    /// positions have bound 0.
    pub min_margin: f64,
    pub violations: usize,
    /// Sessions whose recovered tokens differ from the reference tokens.
    pub token_mismatches: usize,
    pub decoded: BTreeMap<SessionId, (TokenSeq, KvTensor)>,
}

impl RoundtripReport {
    pub fn holds(&self) -> bool {
        self.violations == 0
    }
}

/// Decodes `cache` and checks the per-position error bound. The direct pass
/// runs on `reference` tokens when given, otherwise on the recovered tokens.
pub fn verify_roundtrip(
    cache: &CompressedCache,
    model: &Model,
    reference: Option<&BTreeMap<SessionId, TokenSeq>>,
) -> Result<RoundtripReport> {
    let mut report = RoundtripReport {
        sessions: 0,
        positions: 0,
        max_abs_error: 0.0,
        min_margin: f64::INFINITY,
        violations: 0,
        token_mismatches: 0,
        decoded: BTreeMap::new(),
    };
    for container in &cache.containers {
        let (store, _) = ClusterStore::from_container(container, model)?;
        let mut bounds: BTreeMap<SessionId, Vec<f64>> = BTreeMap::new();
        if let Some(c) = &store.centroid {
            bounds.insert(c.session, vec![0.0; c.tokens.len()]);
        }
        for d in &store.deltas {
            let mut b = vec![0.0; d.divergence];
            b.extend(d.records.iter().map(|r| r.error_bound()));
            bounds.insert(d.session, b);
        }
        for (id, tokens, kv) in store.reconstruct_all_with_tokens(model)? {
            let truth = match reference {
                Some(r) => r.get(&id).ok_or(Error::UnknownSession(id))?,
                None => &tokens,
            };
            if *truth != tokens {
                report.token_mismatches += 1;
            }
            let direct = model.forward(truth)?.0;
            if direct.n_positions() != kv.n_positions() {
                return Err(Error::Corrupted(format!(
                    "session {id} decodes to the wrong length"
                )));
            }
            for (i, bound) in bounds[&id].iter().enumerate() {
                let err = direct
                    .position(i)
                    .iter()
                    .zip(kv.position(i))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                report.max_abs_error = report.max_abs_error.max(err);
                report.min_margin = report.min_margin.min(bound - err);
                report.violations += usize::from(err > *bound);
                report.positions += 1;
            }
            report.sessions += 1;
            if report.decoded.insert(id, (tokens, kv)).is_some() {
                return Err(Error::Corrupted(format!("session {id} stored twice")));
            }
        }
    }
    Ok(report)
}
