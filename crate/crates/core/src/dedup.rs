//! Cluster-relative storage.
//!
//! A cluster stores its centroid's KV cache once. Each other member stores
//! only the positions after its divergence from the centroid; the shared
//! prefix costs zero payload bits because causal decoding makes those KV
//! vectors identical to the centroid's. Sessions outside any cluster go into
//! a centroid-less store with divergence 0.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::codec::config::{CodecConfig, DecodeParams, DeltaMode};
use crate::codec::container::{Container, MemberSection, MEMBER_HEADER_BITS, NO_CENTROID};
use crate::codec::quant::QuantRecord;
use crate::codec::{self, PositionInfo};
use crate::error::{Error, Result};
use crate::index::{ClusterRecord, SessionId};
use crate::model::{common_prefix_len, KvTensor, Model, Token, TokenSeq};
use crate::report::{Format, Table};

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidCache {
    pub session: SessionId,
    pub tokens: TokenSeq,
    pub kv: KvTensor,
    pub fingerprint: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaCache {
    pub session: SessionId,
    pub centroid: Option<SessionId>,
    /// Number of leading tokens shared with the centroid.
    pub divergence: usize,
    /// One record per position `divergence + 1 ..= len`.
    pub records: Vec<QuantRecord>,
    /// Encoder-side diagnostics; empty for stores read back from a container.
    pub info: Vec<PositionInfo>,
}

impl DeltaCache {
    pub fn len(&self) -> usize {
        self.divergence + self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Payload bits of every position `1..=len`; shared-prefix positions are 0.
    pub fn position_bits(&self, dim: usize) -> Vec<u64> {
        std::iter::repeat_n(0, self.divergence)
            .chain(self.records.iter().map(|r| r.bits(dim)))
            .collect()
    }

    /// Serialized size of this member, header included.
    pub fn stored_bits(&self, dim: usize) -> u64 {
        MEMBER_HEADER_BITS + self.records.iter().map(|r| r.bits(dim)).sum::<u64>()
    }
}

/// One container's worth of sessions: an optional centroid and its deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStore {
    pub config: CodecConfig,
    pub centroid: Option<CentroidCache>,
    pub deltas: Vec<DeltaCache>,
}

fn lookup(sessions: &BTreeMap<SessionId, TokenSeq>, id: SessionId) -> Result<&TokenSeq> {
    sessions.get(&id).ok_or(Error::UnknownSession(id))
}

/// Stores a cluster: the centroid in full, every other member as a tail
/// delta. `config` must already be resolved (see [`codec::resolve`]).
pub fn store_cluster(
    model: &Model,
    cluster: &ClusterRecord,
    sessions: &BTreeMap<SessionId, TokenSeq>,
    config: &CodecConfig,
) -> Result<ClusterStore> {
    if cluster.is_empty() {
        return Err(Error::InvalidArgument("empty cluster".into()));
    }
    let c_tokens = lookup(sessions, cluster.centroid)?;
    let (kv, _) = model.forward(c_tokens)?;
    let centroid = CentroidCache {
        session: cluster.centroid,
        tokens: c_tokens.clone(),
        kv,
        fingerprint: model.fingerprint(),
    };
    let others: Vec<SessionId> = cluster
        .session_ids()
        .filter(|&s| s != cluster.centroid)
        .collect();
    let deltas = others
        .par_iter()
        .map(|&s| {
            let tokens = lookup(sessions, s)?;
            let divergence = common_prefix_len(tokens, &centroid.tokens);
            let tail =
                codec::encode_tail(model, s, tokens, divergence, Some(&centroid.kv), config)?;
            Ok(DeltaCache {
                session: s,
                centroid: Some(cluster.centroid),
                divergence,
                records: tail.records,
                info: tail.info,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClusterStore {
        config: *config,
        centroid: Some(centroid),
        deltas,
    })
}

/// Stores sessions with no centroid: every position is a tail position.
pub fn store_unclustered(
    model: &Model,
    ids: &[SessionId],
    sessions: &BTreeMap<SessionId, TokenSeq>,
    config: &CodecConfig,
) -> Result<ClusterStore> {
    let deltas = ids
        .par_iter()
        .map(|&s| {
            let tokens = lookup(sessions, s)?;
            let tail = codec::encode_tail(model, s, tokens, 0, None, config)?;
            Ok(DeltaCache {
                session: s,
                centroid: None,
                divergence: 0,
                records: tail.records,
                info: tail.info,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClusterStore {
        config: *config,
        centroid: None,
        deltas,
    })
}

fn to_u16(n: usize, what: &str) -> Result<u16> {
    u16::try_from(n).map_err(|_| Error::InvalidArgument(format!("{what} {n} exceeds u16")))
}

impl ClusterStore {
    pub fn sessions(&self) -> impl Iterator<Item = SessionId> + '_ {
        self.centroid
            .iter()
            .map(|c| c.session)
            .chain(self.deltas.iter().map(|d| d.session))
    }

    pub fn to_container(&self, model: &Model) -> Result<Container> {
        let centroid_id = self.centroid.as_ref().map(|c| c.session);
        let (tokens, kv) = match &self.centroid {
            Some(c) => (
                c.tokens
                    .iter()
                    .map(|&t| to_u16(t as usize, "token"))
                    .collect::<Result<Vec<_>>>()?,
                c.kv.as_slice().iter().map(|&v| v as f32).collect(),
            ),
            None => (Vec::new(), Vec::new()),
        };
        let members = self
            .deltas
            .iter()
            .map(|d| {
                Ok(MemberSection {
                    session: d.session,
                    centroid: centroid_id.unwrap_or(NO_CENTROID),
                    divergence: to_u16(d.divergence, "divergence position")?,
                    records: d.records.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Container {
            fingerprint: model.fingerprint(),
            config_text: self.config.echo(model.config(), centroid_id),
            centroid_tokens: tokens,
            centroid_kv: kv,
            members,
        })
    }

    /// Rebuilds a store from a container, re-deriving the centroid KV by a
    /// forward pass and checking it against the stored payload.
    pub fn from_container(container: &Container, model: &Model) -> Result<(Self, DecodeParams)> {
        if container.fingerprint != model.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: model.fingerprint(),
                found: container.fingerprint,
            });
        }
        let params = DecodeParams::parse(&container.config_text)?;
        params.check_shape(model.config())?;
        let centroid = match params.centroid {
            None => {
                if !container.centroid_tokens.is_empty() {
                    return Err(Error::Corrupted(
                        "centroid tokens without a centroid id".into(),
                    ));
                }
                None
            }
            Some(id) => {
                let tokens: Vec<Token> = container
                    .centroid_tokens
                    .iter()
                    .map(|&t| t.into())
                    .collect();
                let (kv, _) = model
                    .forward(&tokens)
                    .map_err(|e| Error::Corrupted(e.to_string()))?;
                let matches = kv
                    .as_slice()
                    .iter()
                    .zip(&container.centroid_kv)
                    .all(|(a, b)| (*a as f32).to_bits() == b.to_bits());
                if !matches || kv.as_slice().len() != container.centroid_kv.len() {
                    return Err(Error::Corrupted(
                        "centroid KV payload does not match its tokens".into(),
                    ));
                }
                Some(CentroidCache {
                    session: id,
                    tokens: TokenSeq(tokens),
                    kv,
                    fingerprint: model.fingerprint(),
                })
            }
        };
        let expected_centroid = params.centroid.unwrap_or(NO_CENTROID);
        let centroid_len = centroid.as_ref().map_or(0, |c| c.tokens.len());
        let deltas = container
            .members
            .iter()
            .map(|m| {
                if m.centroid != expected_centroid {
                    return Err(Error::Corrupted(format!(
                        "member {} references centroid {}",
                        m.session, m.centroid
                    )));
                }
                if m.divergence as usize > centroid_len {
                    return Err(Error::Corrupted(format!(
                        "member {} diverges beyond the centroid",
                        m.session
                    )));
                }
                Ok(DeltaCache {
                    session: m.session,
                    centroid: params.centroid,
                    divergence: m.divergence as usize,
                    records: m.records.clone(),
                    info: Vec::new(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let config = params.codec();
        Ok((
            Self {
                config,
                centroid,
                deltas,
            },
            params,
        ))
    }

    /// KV tensor of one stored session.
    pub fn reconstruct(&self, model: &Model, session: SessionId) -> Result<KvTensor> {
        Ok(self.reconstruct_with_tokens(model, session)?.1)
    }

    /// Tokens and KV tensor of one stored session. Member tokens are read
    /// back from the decoded vectors (see [`codec::DecodedTail`]).
    pub fn reconstruct_with_tokens(
        &self,
        model: &Model,
        session: SessionId,
    ) -> Result<(TokenSeq, KvTensor)> {
        if let Some(c) = &self.centroid {
            if c.session == session {
                return Ok((c.tokens.clone(), c.kv.clone()));
            }
        }
        let delta = self
            .deltas
            .iter()
            .find(|d| d.session == session)
            .ok_or(Error::UnknownSession(session))?;
        self.reconstruct_delta(model, delta)
    }

    fn reconstruct_delta(&self, model: &Model, delta: &DeltaCache) -> Result<(TokenSeq, KvTensor)> {
        let (prefix, reference): (&[Token], Option<&KvTensor>) = match &self.centroid {
            Some(c) => (&c.tokens[..delta.divergence], Some(&c.kv)),
            None => (&[], None),
        };
        let mut kv = match reference {
            Some(r) => r.prefix(delta.divergence),
            None => KvTensor::for_model(model.config()),
        };
        let reference = match self.config.delta {
            DeltaMode::Predictive => None,
            DeltaMode::CentroidSubtraction => reference,
        };
        let tail = codec::decode_tail_tokens(
            model,
            delta.session,
            prefix,
            &delta.records,
            reference,
            &self.config,
        )?;
        for pos in &tail.kv {
            kv.push_position(pos);
        }
        let mut tokens = prefix.to_vec();
        tokens.extend(tail.tokens);
        Ok((TokenSeq(tokens), kv))
    }

    /// Every stored session's KV tensor, in parallel.
    pub fn reconstruct_all(&self, model: &Model) -> Result<Vec<(SessionId, KvTensor)>> {
        Ok(self
            .reconstruct_all_with_tokens(model)?
            .into_iter()
            .map(|(id, _, kv)| (id, kv))
            .collect())
    }

    pub fn reconstruct_all_with_tokens(
        &self,
        model: &Model,
    ) -> Result<Vec<(SessionId, TokenSeq, KvTensor)>> {
        let mut out: Vec<(SessionId, TokenSeq, KvTensor)> = self
            .centroid
            .iter()
            .map(|c| (c.session, c.tokens.clone(), c.kv.clone()))
            .collect();
        let tails = self
            .deltas
            .par_iter()
            .map(|d| {
                let (tokens, kv) = self.reconstruct_delta(model, d)?;
                Ok((d.session, tokens, kv))
            })
            .collect::<Result<Vec<_>>>()?;
        out.extend(tails);
        Ok(out)
    }
}

/// Measured versus predicted relative storage cost of clustering.
#[derive(Debug, Clone, PartialEq)]
pub struct StorageReport {
    pub sessions: usize,
    /// Fraction of sessions in clusters of size at least two.
    pub cluster_fraction: f64,
    /// Mean `(n − d̄) / n` over non-centroid clustered members.
    pub tail_ratio: f64,
    pub clustered_bits: u64,
    pub baseline_bits: u64,
    pub measured: f64,
    pub predicted: f64,
}

/// `1 − f (1 − ℓ̄/n)`.
pub fn predicted_relative_cost(cluster_fraction: f64, tail_ratio: f64) -> f64 {
    1.0 - cluster_fraction * (1.0 - tail_ratio)
}

impl StorageReport {
    pub fn relative_error(&self) -> f64 {
        (self.measured - self.predicted).abs() / self.predicted.abs().max(f64::MIN_POSITIVE)
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new([
            "sessions",
            "f",
            "tail_ratio",
            "clustered_bits",
            "baseline_bits",
            "measured_cost",
            "predicted_cost",
        ]);
        t.push([
            self.sessions.to_string(),
            format!("{:.6}", self.cluster_fraction),
            format!("{:.6}", self.tail_ratio),
            self.clustered_bits.to_string(),
            self.baseline_bits.to_string(),
            format!("{:.6}", self.measured),
            format!("{:.6}", self.predicted),
        ]);
        t
    }

    pub fn render(&self, format: Format) -> String {
        self.table().render(format)
    }
}

/// Compares a clustered encoding against the same sessions encoded with
/// clustering disabled at identical codec settings.
pub fn storage_report(
    stores: &[ClusterStore],
    clustered_bits: u64,
    baseline_bits: u64,
) -> Result<StorageReport> {
    let sessions: usize = stores.iter().map(|s| s.sessions().count()).sum();
    if sessions == 0 {
        return Err(Error::InvalidArgument("no sessions stored".into()));
    }
    let mut clustered = 0usize;
    let mut tail_sum = 0.0;
    let mut tail_count = 0usize;
    for s in stores
        .iter()
        .filter(|s| s.centroid.is_some() && !s.deltas.is_empty())
    {
        clustered += 1 + s.deltas.len();
        for d in &s.deltas {
            tail_sum += d.records.len() as f64 / d.len().max(1) as f64;
            tail_count += 1;
        }
    }
    let cluster_fraction = clustered as f64 / sessions as f64;
    let tail_ratio = if tail_count == 0 {
        1.0
    } else {
        tail_sum / tail_count as f64
    };
    Ok(StorageReport {
        sessions,
        cluster_fraction,
        tail_ratio,
        clustered_bits,
        baseline_bits,
        measured: clustered_bits as f64 / baseline_bits as f64,
        predicted: predicted_relative_cost(cluster_fraction, tail_ratio),
    })
}

/// Savings of each layer against storing every session as a raw full-precision
/// centroid in its own container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSavings {
    pub baseline_bits: u64,
    pub total_bits: u64,
    /// Prefix positions skipped, plus container overhead changes.
    pub layer1: i64,
    /// Raw tail positions replaced by residual records.
    pub layer2: i64,
}

impl LayerSavings {
    pub fn total_saved(&self) -> i64 {
        self.baseline_bits as i64 - self.total_bits as i64
    }

    /// Whether the per-layer savings add up to the measured total.
    pub fn is_additive(&self) -> bool {
        self.layer1 + self.layer2 == self.total_saved()
    }
}

/// Attributes the measured saving to the two layers from the container
/// structure alone. `baseline_bits` and `total_bits` should be measured
/// serialized sizes so the sum is an independent check.
pub fn layer_savings(
    model: &Model,
    containers: &[Container],
    raw_bits_of: &dyn Fn(SessionId) -> Result<u64>,
    baseline_bits: u64,
    total_bits: u64,
) -> Result<LayerSavings> {
    let dim = model.config().kv_stride();
    let raw_position = 32 * dim as i64;
    let mut layer1 = 0i64;
    let mut layer2 = 0i64;
    for c in containers {
        let params = DecodeParams::parse(&c.config_text)?;
        match params.centroid {
            Some(id) => layer1 += raw_bits_of(id)? as i64 - c.fixed_bits()? as i64,
            None => layer1 -= c.fixed_bits()? as i64,
        }
        for m in &c.members {
            let tail = m.records.len() as i64;
            layer1 +=
                raw_bits_of(m.session)? as i64 - MEMBER_HEADER_BITS as i64 - tail * raw_position;
            layer2 +=
                tail * raw_position - m.records.iter().map(|r| r.bits(dim) as i64).sum::<i64>();
        }
    }
    Ok(LayerSavings {
        baseline_bits,
        total_bits,
        layer1,
        layer2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::{ClusterCriterion, ClusterMember};
    use crate::model::ModelConfig;

    fn setup() -> (Model, BTreeMap<SessionId, TokenSeq>) {
        let model = Model::build(ModelConfig::default()).unwrap();
        let mut sessions = BTreeMap::new();
        sessions.insert(1, TokenSeq(vec![3, 1, 4, 1, 5, 2]));
        sessions.insert(2, TokenSeq(vec![3, 1, 4, 7, 0, 2]));
        sessions.insert(3, TokenSeq(vec![3, 1, 4, 1, 5, 2]));
        (model, sessions)
    }

    fn record(centroid: SessionId, members: &[SessionId]) -> ClusterRecord {
        ClusterRecord {
            id: 0,
            centroid,
            threshold: 0.0,
            criterion: ClusterCriterion::SharedInformation,
            members: members
                .iter()
                .map(|&s| ClusterMember {
                    session: s,
                    divergence: 0,
                    metric: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn singleton_has_no_deltas() {
        let (model, sessions) = setup();
        let store = store_cluster(
            &model,
            &record(1, &[1]),
            &sessions,
            &CodecConfig::uniform(4),
        )
        .unwrap();
        assert!(store.deltas.is_empty());
        assert_eq!(
            store.centroid.as_ref().unwrap().kv,
            model.forward(&sessions[&1]).unwrap().0
        );
    }

    #[test]
    fn identical_member_costs_only_its_header() {
        let (model, sessions) = setup();
        let store = store_cluster(
            &model,
            &record(1, &[1, 3]),
            &sessions,
            &CodecConfig::uniform(4),
        )
        .unwrap();
        let d = &store.deltas[0];
        assert_eq!(d.divergence, 6);
        assert!(d.records.is_empty());
        assert_eq!(d.position_bits(32), vec![0; 6]);
        assert_eq!(
            store.reconstruct(&model, 3).unwrap(),
            model.forward(&sessions[&3]).unwrap().0
        );
    }

    #[test]
    fn divergent_member_prefix_exact_tail_bounded() {
        let (model, sessions) = setup();
        let store = store_cluster(
            &model,
            &record(1, &[1, 2]),
            &sessions,
            &CodecConfig::uniform(8),
        )
        .unwrap();
        let d = &store.deltas[0];
        assert_eq!(d.divergence, 3);
        let bits = d.position_bits(32);
        assert_eq!(&bits[..3], &[0, 0, 0]);
        assert!(bits[3..].iter().all(|&b| b > 0));
        let kv = store.reconstruct(&model, 2).unwrap();
        let (truth, _) = model.forward(&sessions[&2]).unwrap();
        for i in 0..3 {
            assert_eq!(kv.position(i), truth.position(i));
        }
        for (i, rec) in d.records.iter().enumerate() {
            let bound = rec.error_bound();
            for (a, b) in kv.position(3 + i).iter().zip(truth.position(3 + i)) {
                assert!((a - b).abs() <= bound + 1e-12 * (1.0 + b.abs()));
            }
        }
        assert_eq!(store.reconstruct(&model, 9), Err(Error::UnknownSession(9)));
    }

    #[test]
    fn container_roundtrip_preserves_reconstruction() {
        let (model, sessions) = setup();
        let store = store_cluster(
            &model,
            &record(1, &[1, 2, 3]),
            &sessions,
            &CodecConfig::uniform(6),
        )
        .unwrap();
        let container = store.to_container(&model).unwrap();
        let (back, _) = ClusterStore::from_container(&container, &model).unwrap();
        for s in [1, 2, 3] {
            assert_eq!(
                back.reconstruct(&model, s).unwrap(),
                store.reconstruct(&model, s).unwrap()
            );
        }
        let mut tampered = container.clone();
        tampered.centroid_kv[0] += 1.0;
        assert!(matches!(
            ClusterStore::from_container(&tampered, &model),
            Err(Error::Corrupted(_))
        ));
        let mut wrong = container;
        wrong.fingerprint ^= 1;
        assert!(matches!(
            ClusterStore::from_container(&wrong, &model),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn formula_boundaries() {
        assert_eq!(predicted_relative_cost(0.0, 0.3), 1.0);
        assert_eq!(predicted_relative_cost(1.0, 0.0), 0.0);
        assert!((predicted_relative_cost(0.5, 0.2) - 0.6).abs() < 1e-15);
    }
}
