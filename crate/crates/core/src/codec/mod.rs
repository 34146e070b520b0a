//! Residual coding of KV tails and the multi-container file.
//!
//! Tail positions store the quantized residual against a reference: the
//! member's own predicted KV (default) or the centroid's KV. Member tokens
//! are not stored. In predictive mode the decoder rebuilds the context by
//! taking, at each position, the candidate token whose KV is nearest to the
//! decoded vector; the encoder runs the same test and raises a position's
//! depth until it picks the true token, so both sides always share the
//! context that the next prediction conditions on.

pub mod alloc;
pub mod config;
pub mod container;
pub mod quant;
pub mod ratio;

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::dedup::{store_cluster, store_unclustered, ClusterStore};
use crate::error::{Error, Result};
use crate::index::{ClusterRecord, SessionId};
use crate::model::{KvTensor, Model, Token, TokenSeq};
use crate::predictor::Candidates;

pub use config::{CodecConfig, DecodeParams, DeltaMode, DepthPolicy};
pub use container::Container;
pub use quant::QuantRecord;

/// Encoder-side facts about one tail position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionInfo {
    /// 1-based position in the session.
    pub position: usize,
    pub token: Token,
    /// Depth chosen by the policy before any raise for token recovery.
    pub planned_depth: u8,
    pub depth: u8,
    pub surprisal: f64,
    /// Exact per-component variance of the next KV vector at this context.
    pub variance: f64,
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TailEncoding {
    pub records: Vec<QuantRecord>,
    pub info: Vec<PositionInfo>,
}

fn planned_depth(config: &CodecConfig, surprisal: f64, variance: f64, dim: usize) -> Result<u8> {
    match config.depth {
        DepthPolicy::Uniform { bits } => Ok(bits),
        DepthPolicy::Adaptive {
            base,
            mean_surprisal,
        } => {
            let hbar = mean_surprisal.ok_or_else(|| {
                Error::InvalidArgument("adaptive policy needs a calibrated mean surprisal".into())
            })?;
            alloc::adaptive_depth(surprisal, base, hbar)
        }
        DepthPolicy::Waterfill { distortion } => alloc::waterfill_depth(variance, distortion, dim),
    }
}

fn reference_at(reference: Option<&KvTensor>, i: usize, dim: usize) -> Vec<f64> {
    match reference {
        Some(r) if i < r.n_positions() => r.position(i).to_vec(),
        _ => vec![0.0; dim],
    }
}

/// Encodes positions `divergence + 1 ..= len` of `tokens`. `centroid` is
/// used only in centroid-subtraction mode.
pub fn encode_tail(
    model: &Model,
    session: SessionId,
    tokens: &[Token],
    divergence: usize,
    centroid: Option<&KvTensor>,
    config: &CodecConfig,
) -> Result<TailEncoding> {
    config.validate()?;
    let mut state = model.state_for(&tokens[..divergence])?;
    model.config().check_tokens(tokens)?;
    let dim = model.config().kv_stride();
    let mut out = TailEncoding {
        records: Vec::with_capacity(tokens.len() - divergence),
        info: Vec::with_capacity(tokens.len() - divergence),
    };
    for (i, &token) in tokens.iter().enumerate().skip(divergence) {
        let at = |e: Error| e.at(session, i + 1);
        let cands = Candidates::at(model, &state);
        let truth = &cands.kvs[token as usize];
        let variance = cands.variance() / dim as f64;
        let surprisal = cands.dist.surprisal(token);
        let (base, predictive) = match config.delta {
            DeltaMode::Predictive => (cands.predict(model, config.predictor).map_err(at)?.kv, true),
            DeltaMode::CentroidSubtraction => (reference_at(centroid, i, dim), false),
        };
        let residual: Vec<f64> = truth.iter().zip(&base).map(|(a, b)| a - b).collect();
        let scale = quant::max_abs_scale(&residual).map_err(at)?;
        let planned = planned_depth(config, surprisal, variance, dim).map_err(at)?;
        let mut depth = planned;
        let (record, clamped) = loop {
            let (record, clamped) = quant::encode(&residual, depth, scale).map_err(at)?;
            if !predictive {
                break (record, clamped);
            }
            let decoded = add(&base, &quant::decode(&record, dim).map_err(at)?);
            if cands.nearest(&decoded) == token {
                break (record, clamped);
            }
            if depth == quant::MAX_DEPTH {
                return Err(at(Error::Unrecoverable { token }));
            }
            depth += 1;
        };
        out.info.push(PositionInfo {
            position: i + 1,
            token,
            planned_depth: planned,
            depth,
            surprisal,
            variance,
            clamped,
        });
        out.records.push(record);
        model.push(&mut state, token);
    }
    Ok(out)
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Decoded tail vectors and the tokens read back from them.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedTail {
    pub kv: Vec<Vec<f64>>,
    /// Nearest-candidate token at each position. Exact in predictive mode,
    /// where the encoder guarantees it; a best guess in centroid mode.
    pub tokens: Vec<Token>,
}

/// Decodes tail records following the shared `prefix`. `centroid` is the
/// reference in centroid-subtraction mode and ignored otherwise.
pub fn decode_tail(
    model: &Model,
    session: SessionId,
    prefix: &[Token],
    records: &[QuantRecord],
    centroid: Option<&KvTensor>,
    config: &CodecConfig,
) -> Result<Vec<Vec<f64>>> {
    Ok(decode_tail_tokens(model, session, prefix, records, centroid, config)?.kv)
}

pub fn decode_tail_tokens(
    model: &Model,
    session: SessionId,
    prefix: &[Token],
    records: &[QuantRecord],
    centroid: Option<&KvTensor>,
    config: &CodecConfig,
) -> Result<DecodedTail> {
    let dim = model.config().kv_stride();
    let len = prefix.len() + records.len();
    if len > model.config().max_context {
        return Err(Error::SequenceTooLong {
            len,
            max: model.config().max_context,
        }
        .at(session, len));
    }
    let mut out = DecodedTail {
        kv: Vec::with_capacity(records.len()),
        tokens: Vec::with_capacity(records.len()),
    };
    let mut state = model.state_for(prefix)?;
    for (j, rec) in records.iter().enumerate() {
        let i = prefix.len() + j;
        let at = |e: Error| e.at(session, i + 1);
        let cands = Candidates::at(model, &state);
        let base = match config.delta {
            DeltaMode::CentroidSubtraction => reference_at(centroid, i, dim),
            DeltaMode::Predictive => cands.predict(model, config.predictor).map_err(at)?.kv,
        };
        let decoded = add(&base, &quant::decode(rec, dim).map_err(at)?);
        let token = cands.nearest(&decoded);
        model.push(&mut state, token);
        out.tokens.push(token);
        out.kv.push(decoded);
    }
    Ok(out)
}

/// Mean realized surprisal over every token of every session.
pub fn calibrate_mean_surprisal<'a>(
    model: &Model,
    sessions: impl IntoIterator<Item = &'a TokenSeq>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in sessions {
        let trace = model.surprisal_trace(s)?;
        total += trace.surprisal.iter().sum::<f64>();
        count += trace.surprisal.len();
    }
    if count == 0 || total <= 0.0 {
        return Err(Error::InvalidArgument(
            "cannot calibrate mean surprisal on an empty or deterministic corpus".into(),
        ));
    }
    Ok(total / count as f64)
}

/// Fills in corpus-dependent parameters (the adaptive mean surprisal).
pub fn resolve(
    config: &CodecConfig,
    model: &Model,
    sessions: &BTreeMap<SessionId, TokenSeq>,
) -> Result<CodecConfig> {
    config.validate()?;
    let mut resolved = *config;
    if let DepthPolicy::Adaptive {
        base,
        mean_surprisal: None,
    } = config.depth
    {
        resolved.depth = DepthPolicy::Adaptive {
            base,
            mean_surprisal: Some(calibrate_mean_surprisal(model, sessions.values())?),
        };
    }
    Ok(resolved)
}

/// A compressed file: one container per multi-member cluster, then one
/// centroid-less container holding every unclustered session.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedCache {
    pub containers: Vec<Container>,
}

impl CompressedCache {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        container::write_all(&self.containers)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(Self {
            containers: container::read_all(bytes)?,
        })
    }

    /// Exact serialized size in bits.
    pub fn total_bits(&self) -> Result<u64> {
        self.containers.iter().map(Container::bits).sum()
    }
}

/// The compressed file plus the in-memory stores it was written from.
#[derive(Debug, Clone)]
pub struct Compressed {
    pub cache: CompressedCache,
    pub stores: Vec<ClusterStore>,
    pub config: CodecConfig,
}

fn check_sessions(sessions: &BTreeMap<SessionId, TokenSeq>) -> Result<()> {
    for (&id, s) in sessions {
        if s.is_empty() {
            return Err(Error::EmptySequence.at(id, 0));
        }
    }
    Ok(())
}

/// Clusters of two or more sessions get a centroid container; every other
/// session (including ones no record mentions) is stored without a centroid.
pub fn compress_detailed(
    model: &Model,
    sessions: &BTreeMap<SessionId, TokenSeq>,
    clusters: &[ClusterRecord],
    config: &CodecConfig,
) -> Result<Compressed> {
    check_sessions(sessions)?;
    let config = resolve(config, model, sessions)?;
    let mut seen = BTreeSet::new();
    for id in clusters.iter().flat_map(|c| c.session_ids()) {
        if !sessions.contains_key(&id) {
            return Err(Error::UnknownSession(id));
        }
        if !seen.insert(id) {
            return Err(Error::DuplicateSession(id));
        }
    }
    let multi: Vec<&ClusterRecord> = clusters.iter().filter(|c| c.len() >= 2).collect();
    let mut stores = multi
        .par_iter()
        .map(|c| store_cluster(model, c, sessions, &config))
        .collect::<Result<Vec<_>>>()?;
    let clustered: BTreeSet<SessionId> = multi.iter().flat_map(|c| c.session_ids()).collect();
    let rest: Vec<SessionId> = sessions
        .keys()
        .copied()
        .filter(|id| !clustered.contains(id))
        .collect();
    if !rest.is_empty() {
        stores.push(store_unclustered(model, &rest, sessions, &config)?);
    }
    let containers = stores
        .iter()
        .map(|s| s.to_container(model))
        .collect::<Result<Vec<_>>>()?;
    Ok(Compressed {
        cache: CompressedCache { containers },
        stores,
        config,
    })
}

pub fn compress(
    model: &Model,
    sessions: &BTreeMap<SessionId, TokenSeq>,
    clusters: &[ClusterRecord],
    config: &CodecConfig,
) -> Result<CompressedCache> {
    Ok(compress_detailed(model, sessions, clusters, config)?.cache)
}

/// Every session's reconstructed KV tensor.
pub fn decompress(cache: &CompressedCache, model: &Model) -> Result<BTreeMap<SessionId, KvTensor>> {
    Ok(decompress_sessions(cache, model)?
        .into_iter()
        .map(|(id, (_, kv))| (id, kv))
        .collect())
}

/// Every session's recovered tokens and reconstructed KV tensor.
pub fn decompress_sessions(
    cache: &CompressedCache,
    model: &Model,
) -> Result<BTreeMap<SessionId, (TokenSeq, KvTensor)>> {
    let mut out = BTreeMap::new();
    for c in &cache.containers {
        let (store, _) = ClusterStore::from_container(c, model)?;
        for (id, tokens, kv) in store.reconstruct_all_with_tokens(model)? {
            if out.insert(id, (tokens, kv)).is_some() {
                return Err(Error::Corrupted(format!("session {id} stored twice")));
            }
        }
    }
    Ok(out)
}

/// No-compression reference: every session as the raw centroid of its own
/// container, echoing `config`.
pub fn raw_baseline(
    model: &Model,
    sessions: &BTreeMap<SessionId, TokenSeq>,
    config: &CodecConfig,
) -> Result<CompressedCache> {
    check_sessions(sessions)?;
    let containers = sessions
        .iter()
        .map(|(&id, tokens)| {
            let (kv, _) = model.forward(tokens)?;
            ClusterStore {
                config: *config,
                centroid: Some(crate::dedup::CentroidCache {
                    session: id,
                    tokens: tokens.clone(),
                    kv,
                    fingerprint: model.fingerprint(),
                }),
                deltas: Vec::new(),
            }
            .to_container(model)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CompressedCache { containers })
}

/// Serialized bits of one session's raw baseline container.
pub fn raw_container_bits(model: &Model, config: &CodecConfig, id: SessionId, len: usize) -> u64 {
    let text = config.echo(model.config(), Some(id));
    container::fixed_bits(text.len(), len, model.config().kv_stride())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Model {
        Model::build(ModelConfig::default()).unwrap()
    }

    #[test]
    fn predictive_tail_roundtrip_within_bound() {
        let m = model();
        let tokens = [2, 7, 1, 3, 0, 6];
        for bits in [1, 2, 4, 8] {
            let enc = encode_tail(&m, 0, &tokens, 0, None, &CodecConfig::uniform(bits)).unwrap();
            let dec =
                decode_tail(&m, 0, &[], &enc.records, None, &CodecConfig::uniform(bits)).unwrap();
            let (truth, _) = m.forward(&tokens).unwrap();
            for (i, (rec, pos)) in enc.records.iter().zip(&dec).enumerate() {
                assert!(rec.depth >= bits);
                for (a, b) in pos.iter().zip(truth.position(i)) {
                    assert!((a - b).abs() <= rec.error_bound() + 1e-12 * (1.0 + b.abs()));
                }
            }
        }
    }

    #[test]
    fn centroid_subtraction_roundtrip() {
        let m = model();
        let centroid = [2, 7, 1, 3];
        let member = [2, 7, 5, 3, 1];
        let (ckv, _) = m.forward(&centroid).unwrap();
        let cfg = CodecConfig {
            delta: DeltaMode::CentroidSubtraction,
            ..CodecConfig::uniform(6)
        };
        let enc = encode_tail(&m, 1, &member, 2, Some(&ckv), &cfg).unwrap();
        assert!(enc.info.iter().all(|p| p.depth == p.planned_depth));
        let dec = decode_tail(&m, 1, &centroid[..2], &enc.records, Some(&ckv), &cfg).unwrap();
        let (truth, _) = m.forward(&member).unwrap();
        for (j, rec) in enc.records.iter().enumerate() {
            for (a, b) in dec[j].iter().zip(truth.position(2 + j)) {
                assert!((a - b).abs() <= rec.error_bound() + 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn adaptive_requires_calibration() {
        let m = model();
        let cfg = CodecConfig {
            depth: DepthPolicy::Adaptive {
                base: 3,
                mean_surprisal: None,
            },
            ..CodecConfig::default()
        };
        assert!(encode_tail(&m, 0, &[1, 2], 0, None, &cfg).is_err());
        let mut sessions = BTreeMap::new();
        sessions.insert(0, TokenSeq(vec![1, 2, 3]));
        let resolved = resolve(&cfg, &m, &sessions).unwrap();
        let DepthPolicy::Adaptive {
            mean_surprisal: Some(h),
            ..
        } = resolved.depth
        else {
            panic!("not resolved")
        };
        let trace = m.surprisal_trace(&[1, 2, 3]).unwrap();
        assert!((h - trace.mean_surprisal()).abs() < 1e-12);
    }

    #[test]
    fn errors_carry_position() {
        let m = model();
        let cfg = CodecConfig::uniform(4);
        let err = decode_tail(
            &m,
            5,
            &[1; 6],
            &vec![
                QuantRecord {
                    depth: 0,
                    scale: 0.0,
                    codes: vec![]
                };
                3
            ],
            None,
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, Error::AtPosition { session: 5, .. }));
    }
}
