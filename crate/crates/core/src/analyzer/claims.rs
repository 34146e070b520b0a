//! The consolidated claim matrix: one row per checked property, with a
//! pass/fail verdict and a signed margin (non-negative exactly when the row
//! passes, except where noted in the detail).

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::alloc::adaptive_depth;
use crate::codec::ratio::{sig_figs, theoretical_ratio, RatioInputs};
use crate::codec::{
    decode_tail, decompress, encode_tail, CodecConfig, CompressedCache, DepthPolicy,
};
use crate::enumerate::all_sequences;
use crate::error::Result;
use crate::index::{trie_metric, ClusterCriterion, PrefixIndex, SessionId};
use crate::model::{common_prefix_len, Model, ModelConfig, Token, TokenSeq};
use crate::pipeline::{run_compression, verify_roundtrip, ClusterSettings, CompressionRun};
use crate::report::Table;

use super::asymptotic::{verify_asymptotic, ExplicitSource, MarkovSource};
use super::duality::{verify_duality, DUALITY_TOLERANCE};
use super::entropy::{verify_injectivity, verify_sequential_bound};
use super::metric::verify_metric_inequalities;
use super::residual::{verify_residual_bounds, BoundCheck};
use super::workload::{generate_workload, Workload, WorkloadSpec};

/// Tolerance of the KV/token entropy equality, in bits.
pub const ENTROPY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ClaimRow {
    pub claim: &'static str,
    pub passed: bool,
    pub margin: f64,
    pub detail: String,
}

impl ClaimRow {
    fn new(claim: &'static str, passed: bool, margin: f64, detail: impl Into<String>) -> Self {
        Self {
            claim,
            passed,
            margin,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClaimMatrix {
    pub rows: Vec<ClaimRow>,
}

impl ClaimMatrix {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ClaimRow> {
        self.rows.iter().filter(|r| !r.passed)
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(["claim", "status", "margin", "detail"]);
        for r in &self.rows {
            t.push([
                r.claim.to_string(),
                if r.passed { "pass" } else { "fail" }.to_string(),
                format!("{:.6e}", r.margin),
                r.detail.clone(),
            ]);
        }
        t
    }
}

/// Sizes of every check. The defaults are the desk-scale settings.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub model: ModelConfig,
    /// Sequence length for the entropy equality.
    pub entropy_len: usize,
    /// Context length for injectivity, residual bounds and duality.
    pub context_len: usize,
    pub duality_ks: Vec<usize>,
    /// `(f, ℓ̄/n)` targets for the storage formula.
    pub storage_targets: Vec<(f64, f64)>,
    pub storage_sessions: usize,
    pub storage_length: usize,
    pub storage_bits: u8,
    pub storage_tolerance: f64,
    pub asymptotic_len: usize,
    pub trie_vocab: usize,
    pub trie_sessions: usize,
    pub trie_query_len: usize,
    /// Sequence length for the metric inequality triples.
    pub metric_len: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            entropy_len: 5,
            context_len: 4,
            duality_ks: vec![1, 2, 4, 8],
            storage_targets: vec![(0.5, 0.2), (0.9, 0.1), (1.0, 0.5)],
            storage_sessions: 1000,
            storage_length: 80,
            storage_bits: 16,
            storage_tolerance: 0.05,
            asymptotic_len: 64,
            trie_vocab: 4,
            trie_sessions: 50,
            trie_query_len: 6,
            metric_len: 2,
            seed: 0,
        }
    }
}

/// The same model with room for `len` tokens.
pub fn with_context(config: &ModelConfig, len: usize) -> ModelConfig {
    ModelConfig {
        max_context: config.max_context.max(len),
        ..*config
    }
}

pub fn verify_all(options: &VerifyOptions) -> Result<ClaimMatrix> {
    let model = Model::build(options.model)?;
    let mut rows = Vec::new();
    rows.extend(ratio_rows()?);
    rows.extend(entropy_rows(&model, options)?);
    rows.extend(residual_rows(&model, options)?);
    rows.extend(dedup_rows(options)?);
    rows.extend(storage_rows(options)?);
    rows.extend(roundtrip_rows(options)?);
    rows.extend(waterfill_rows(options)?);
    rows.extend(adaptive_rows()?);
    rows.extend(duality_rows(&model, options)?);
    rows.extend(asymptotic_rows(options)?);
    rows.extend(trie_rows(options)?);
    rows.extend(metric_rows(&model, options)?);
    rows.extend(determinism_rows(options)?);
    Ok(ClaimMatrix { rows })
}

pub fn ratio_rows() -> Result<Vec<ClaimRow>> {
    let base = RatioInputs::default();
    let a = theoretical_ratio(&base)?;
    let b16 = theoretical_ratio(&RatioInputs { bits: 16.0, ..base })?;
    let oh = theoretical_ratio(&RatioInputs {
        overhead: 1000.0,
        ..base
    })?;
    let got = [
        sig_figs(a.bits_per_token, 3),
        sig_figs(a.vs_quantized, 3),
        sig_figs(b16.vs_quantized, 2),
        sig_figs(oh.vs_quantized, 3),
    ];
    let want = ["3.93e6", "9.14e5", "4.9e6", "9.14e2"];
    let passed = got == want;
    Ok(vec![ClaimRow::new(
        "ratio_arithmetic",
        passed,
        if passed { 0.0 } else { -1.0 },
        format!(
            "bits/token={} ratio={} b16={} overhead1000={}",
            got[0], got[1], got[2], got[3]
        ),
    )])
}

pub fn entropy_rows(model: &Model, options: &VerifyOptions) -> Result<Vec<ClaimRow>> {
    let report = verify_sequential_bound(model, options.entropy_len)?;
    let gap = report.max_gap();
    let inj = verify_injectivity(model, options.context_len)?;
    let mean_gap = report.log2_perplexity - report.mean_kv_entropy();
    Ok(vec![
        ClaimRow::new(
            "kv_entropy_equals_token_entropy",
            gap <= ENTROPY_TOLERANCE && report.injective(),
            ENTROPY_TOLERANCE - gap,
            format!(
                "len<={} max_gap={gap:.3e} kv_collisions={}",
                options.entropy_len, report.kv_collisions
            ),
        ),
        ClaimRow::new(
            "mean_kv_entropy_within_log_perplexity",
            mean_gap >= -ENTROPY_TOLERANCE,
            mean_gap + ENTROPY_TOLERANCE,
            format!(
                "mean_kv_entropy={:.12} log2_perplexity={:.12}",
                report.mean_kv_entropy(),
                report.log2_perplexity
            ),
        ),
        ClaimRow::new(
            "layer1_key_injectivity",
            inj.holds(),
            if inj.holds() { 0.0 } else { -1.0 },
            match &inj.violation {
                None => format!("contexts={} seed={}", inj.contexts, model.config().seed),
                Some((ctx, a, b)) => format!(
                    "seed={} context={ctx:?} tokens {a} and {b} collide",
                    model.config().seed
                ),
            },
        ),
    ])
}

pub fn residual_rows(model: &Model, options: &VerifyOptions) -> Result<Vec<ClaimRow>> {
    let report = verify_residual_bounds(model, options.context_len)?;
    Ok(BoundCheck::ALL
        .iter()
        .map(|&check| {
            let s = report.summary(check);
            ClaimRow::new(
                check.name(),
                s.all_pass(),
                s.worst_margin,
                format!(
                    "passed={}/{} worst_context={} lip={:.6} c_e={:.6}",
                    s.passed,
                    s.passed + s.failed,
                    super::residual::tokens_label(&s.worst_context),
                    report.lipschitz,
                    report.embedding_diameter
                ),
            )
        })
        .collect())
}

/// Two sessions sharing a prefix of length `n − tail`, clustered together.
pub fn shared_prefix_pair(
    model: &Model,
    length: usize,
    tail: usize,
    seed: u64,
) -> Result<Workload> {
    generate_workload(
        model,
        &WorkloadSpec {
            sessions: 2,
            length,
            cluster_fraction: 1.0,
            tail_ratio: tail as f64 / length as f64,
            temperature: 1.0,
            seed,
        },
    )
}

pub fn dedup_rows(options: &VerifyOptions) -> Result<Vec<ClaimRow>> {
    let length = options.model.max_context;
    let tail = length / 2;
    let model = Arc::new(Model::build(options.model)?);
    let w = shared_prefix_pair(&model, length, tail, options.seed)?;
    let run = run_compression(
        &model,
        &w.sessions,
        &ClusterSettings {
            threshold: w.suggested_threshold.max(0.0),
            ..ClusterSettings::default()
        },
        &CodecConfig::default(),
    )?;
    let dim = model.config().kv_stride();
    let k = w.shared_prefix_len;
    let decoded = decompress(&CompressedCache::from_bytes(&run.bytes)?, &model)?;
    let mut prefix_bits = None;
    let mut identical = false;
    for store in &run.compressed.stores {
        for d in store.deltas.iter().filter(|d| d.centroid.is_some()) {
            prefix_bits = Some(d.position_bits(dim)[..k].iter().sum::<u64>());
            let direct = model.forward(&w.sessions[&d.session][..k])?.0;
            identical = decoded[&d.session].prefix(k) == direct;
        }
    }
    let passed = prefix_bits == Some(0) && identical;
    Ok(vec![ClaimRow::new(
        "lossless_prefix_dedup",
        passed,
        if passed { 0.0 } else { -1.0 },
        format!(
            "prefix_len={k} member_prefix_bits={prefix_bits:?} prefix_bit_identical={identical}"
        ),
    )])
}

/// Runs the pipeline on a workload generated for `(f, ℓ̄/n)`.
pub fn storage_run(
    options: &VerifyOptions,
    f: f64,
    tail_ratio: f64,
) -> Result<(Workload, CompressionRun)> {
    let model = Arc::new(Model::build(with_context(
        &options.model,
        options.storage_length,
    ))?);
    let w = generate_workload(
        &model,
        &WorkloadSpec {
            sessions: options.storage_sessions,
            length: options.storage_length,
            cluster_fraction: f,
            tail_ratio,
            temperature: 1.0,
            seed: options.seed,
        },
    )?;
    let run = run_compression(
        &model,
        &w.sessions,
        &ClusterSettings {
            threshold: w.suggested_threshold.max(0.0),
            criterion: ClusterCriterion::SharedInformation,
            ..ClusterSettings::default()
        },
        &CodecConfig::uniform(options.storage_bits),
    )?;
    Ok((w, run))
}

pub fn storage_rows(options: &VerifyOptions) -> Result<Vec<ClaimRow>> {
    let mut rows = Vec::new();
    for &(f, r) in &options.storage_targets {
        let (_, run) = storage_run(options, f, r)?;
        let s = &run.storage;
        let err = s.relative_error();
        rows.push(ClaimRow::new(
            "storage_cost_formula",
            err <= options.storage_tolerance,
            options.storage_tolerance - err,
            format!(
                "target=({f},{r}) achieved=({:.4},{:.4}) measured={:.6} predicted={:.6}",
                s.cluster_fraction, s.tail_ratio, s.measured, s.predicted
            ),
        ));
        let sv = &run.savings;
        rows.push(ClaimRow::new(
            "layer_savings_additive",
            sv.is_additive(),
            0.0 - (sv.layer1 + sv.layer2 - sv.total_saved()).abs() as f64,
            format!(
                "target=({f},{r}) layer1={} layer2={} total={}",
                sv.layer1,
                sv.layer2,
                sv.total_saved()
            ),
        ));
    }
    Ok(rows)
}

fn roundtrip_workload(options: &VerifyOptions) -> Result<(Arc<Model>, Workload)> {
    let model = Arc::new(Model::build(options.model)?);
    let w = generate_workload(
        &model,
        &WorkloadSpec {
            sessions: 40,
            length: options.model.max_context,
            cluster_fraction: 0.5,
            tail_ratio: 0.5,
            temperature: 1.0,
            seed: options.seed,
        },
    )?;
    Ok((model, w))
}

pub fn roundtrip_rows(options: &VerifyOptions) -> Result<Vec<ClaimRow>> {
    let (model, w) = roundtrip_workload(options)?;
    let settings = ClusterSettings {
        threshold: w.suggested_threshold.max(0.0),
        ..ClusterSettings::default()
    };
    let mut configs: Vec<(String, CodecConfig)> = [2u8, 4, 8]
        .iter()
        .map(|&b| (format!("uniform{b}"), CodecConfig::uniform(b)))
        .collect();
    configs.push((
        "adaptive3".into(),
        CodecConfig {
            depth: DepthPolicy::Adaptive {
                base: 3,
                mean_surprisal: None,
            },
            ..CodecConfig::default()
        },
    ));
    let mut rows = Vec::new();
    for (label, cfg) in configs {
        let run = run_compression(&model, &w.sessions, &settings, &cfg)?;
        let cache = CompressedCache::from_bytes(&run.bytes)?;
        let r = verify_roundtrip(&cache, &model, Some(&w.sessions))?;
        rows.push(ClaimRow::new(
            "roundtrip_error_bound",
            r.holds() && r.token_mismatches == 0,
            r.min_margin,
            format!(
                "mode={label} sessions={} positions={} max_abs_error={:.3e}",
                r.sessions, r.positions, r.max_abs_error
            ),
        ));
    }
    Ok(rows)
}

/// Outcome of comparing waterfill allocation with a uniform depth.
#[derive(Debug, Clone, PartialEq)]
pub struct WaterfillComparison {
    pub distortion: f64,
    /// Fraction of positions whose per-component variance is at most `D`.
    pub low_variance_fraction: f64,
    pub waterfill_bits: u64,
    pub uniform_bits: u64,
    pub zero_depth_positions: usize,
    /// Mean per-component squared error over depth-0 positions.
    pub zero_depth_mse: f64,
    /// Largest per-position per-component squared error at depth 0.
    pub zero_depth_worst: f64,
}

/// Sets `D` to the `quantile` of per-position variances over `sessions`
/// and compares waterfill against uniform depth `base` on the payload.
pub fn waterfill_comparison(
    model: &Model,
    sessions: &BTreeMap<SessionId, TokenSeq>,
    quantile: f64,
    base: u8,
) -> Result<WaterfillComparison> {
    let dim = model.config().kv_stride();
    let uniform = CodecConfig::uniform(base);
    let mut variances = Vec::new();
    let mut uniform_bits = 0;
    for (&id, s) in sessions {
        let enc = encode_tail(model, id, s, 0, None, &uniform)?;
        uniform_bits += enc.records.iter().map(|r| r.bits(dim)).sum::<u64>();
        variances.extend(enc.info.iter().map(|i| i.variance));
    }
    let mut sorted = variances.clone();
    sorted.sort_by(f64::total_cmp);
    let idx = ((quantile * sorted.len() as f64) as usize).min(sorted.len() - 1);
    let distortion = sorted[idx];
    let cfg = CodecConfig {
        depth: DepthPolicy::Waterfill { distortion },
        ..CodecConfig::default()
    };
    let mut out = WaterfillComparison {
        distortion,
        low_variance_fraction: variances.iter().filter(|&&v| v <= distortion).count() as f64
            / variances.len() as f64,
        waterfill_bits: 0,
        uniform_bits,
        zero_depth_positions: 0,
        zero_depth_mse: 0.0,
        zero_depth_worst: 0.0,
    };
    let mut sum = 0.0;
    for (&id, s) in sessions {
        let enc = encode_tail(model, id, s, 0, None, &cfg)?;
        out.waterfill_bits += enc.records.iter().map(|r| r.bits(dim)).sum::<u64>();
        let decoded = decode_tail(model, id, &[], &enc.records, None, &cfg)?;
        let direct = model.forward(s)?.0;
        for (i, info) in enc.info.iter().enumerate() {
            if info.depth != 0 {
                continue;
            }
            let mse = direct
                .position(i)
                .iter()
                .zip(&decoded[i])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / dim as f64;
            sum += mse;
            out.zero_depth_positions += 1;
            out.zero_depth_worst = out.zero_depth_worst.max(mse);
        }
    }
    out.zero_depth_mse = sum / out.zero_depth_positions.max(1) as f64;
    Ok(out)
}

/// Quantile of per-position variance used as the waterfill distortion.
pub const WATERFILL_QUANTILE: f64 = 0.25;

pub fn waterfill_sessions(
    options: &VerifyOptions,
) -> Result<(Model, BTreeMap<SessionId, TokenSeq>)> {
    let length = 16;
    let model = Model::build(with_context(&options.model, length))?;
    let w = generate_workload(
        &model,
        &WorkloadSpec {
            sessions: 200,
            length,
            cluster_fraction: 0.0,
            tail_ratio: 1.0,
            temperature: 1.0,
            seed: options.seed,
        },
    )?;
    Ok((model, w.sessions))
}

pub fn waterfill_rows(options: &VerifyOptions) -> Result<Vec<ClaimRow>> {
    let (model, sessions) = waterfill_sessions(options)?;
    let c = waterfill_comparison(&model, &sessions, WATERFILL_QUANTILE, 3)?;
    let dominates = c.low_variance_fraction >= 0.2 && c.waterfill_bits < c.uniform_bits;
    let sound = c.zero_depth_positions > 0 && c.zero_depth_mse <= c.distortion;
    Ok(vec![
        ClaimRow::new(
            "waterfill_dominates_uniform",
            dominates,
            c.uniform_bits as f64 - c.waterfill_bits as f64,
            format!(
                "D={:.6} low_variance_fraction={:.3} waterfill_bits={} uniform3_bits={}",
                c.distortion, c.low_variance_fraction, c.waterfill_bits, c.uniform_bits
            ),
        ),
        ClaimRow::new(
            "zero_depth_distortion",
            sound,
            c.distortion - c.zero_depth_mse,
            format!(
                "depth0_positions={} mse={:.6e} worst={:.6e} D={:.6}",
                c.zero_depth_positions, c.zero_depth_mse, c.zero_depth_worst, c.distortion
            ),
        ),
    ])
}

pub fn adaptive_rows() -> Result<Vec<ClaimRow>> {
    let hbar = 4.3;
    let got = [
        adaptive_depth(0.0, 3, hbar)?,
        adaptive_depth(hbar, 3, hbar)?,
        adaptive_depth(2.0 * hbar + 1e-9, 3, hbar)?,
    ];
    let passed = got == [1, 3, 6];
    Ok(vec![ClaimRow::new(
        "adaptive_depth_examples",
        passed,
        if passed { 0.0 } else { -1.0 },
        format!("depths={got:?} for h in {{0, h̄, 2h̄+ε}} at b0=3"),
    )])
}

pub fn duality_rows(model: &Model, options: &VerifyOptions) -> Result<Vec<ClaimRow>> {
    let mut rows = Vec::new();
    for &k in &options.duality_ks {
        let r = verify_duality(model, k, options.context_len)?;
        let worst = if r.full_vocabulary {
            r.max_gap.max(r.max_gap_to_one)
        } else {
            r.max_gap
        };
        rows.push(ClaimRow::new(
            "draft_acceptance_equals_topk_mass",
            r.acceptance_matches(),
            DUALITY_TOLERANCE - worst,
            format!(
                "k={k} contexts={} max_gap={:.3e} mean_acceptance={:.6}",
                r.contexts, worst, r.mean_acceptance
            ),
        ));
        rows.push(ClaimRow::new(
            "topk_kv_variance_bound",
            r.variance_bounded(),
            r.diameter_bound - r.max_topk_variance,
            format!(
                "k={k} lipschitz_violations={} diameter_violations={} max_var={:.6}",
                r.lipschitz_violations, r.diameter_violations, r.max_topk_variance
            ),
        ));
    }
    Ok(rows)
}

pub fn asymptotic_rows(options: &VerifyOptions) -> Result<Vec<ClaimRow>> {
    let n = options.asymptotic_len;
    let markov = verify_asymptotic(&MarkovSource::default(), n)?;
    let linear = verify_asymptotic(&ExplicitSource::linear_decay(3.0, 0.5), n)?;
    let constant = verify_asymptotic(&ExplicitSource::constant(1.5), n)?;
    let flat = constant.running_mean.iter().all(|&m| m == 1.5);
    Ok(vec![
        ClaimRow::new(
            "monotone_running_entropy",
            markov.non_increasing(),
            -markov.max_increase(),
            format!("source={} n={n}", markov.source),
        ),
        ClaimRow::new(
            "monotone_running_entropy",
            linear.strictly_decreasing(),
            -linear.max_increase(),
            format!("source={} n={n} strict", linear.source),
        ),
        ClaimRow::new(
            "monotone_running_entropy",
            flat,
            if flat { 0.0 } else { -1.0 },
            format!("source={} n={n} constant", constant.source),
        ),
    ])
}

pub fn metric_rows(model: &Model, options: &VerifyOptions) -> Result<Vec<ClaimRow>> {
    let r = verify_metric_inequalities(model, options.metric_len)?;
    Ok(vec![ClaimRow::new(
        "reverse_ultrametric",
        r.lower_holds(),
        0.0 - r.lower_violations as f64,
        format!(
            "triples={} lower_violations={} upper_violations={} (upper form not asserted)",
            r.triples, r.lower_violations, r.upper_violations
        ),
    )])
}

/// Brute-force best match: the stored session maximizing the shared-prefix
/// metric, ties to the longer prefix, then the lower id.
pub fn brute_force_best_match(
    model: &Model,
    sessions: &BTreeMap<SessionId, TokenSeq>,
    query: &[Token],
) -> Result<Option<(SessionId, usize, f64)>> {
    let mut best: Option<(SessionId, usize, f64)> = None;
    for (&id, s) in sessions {
        let metric = trie_metric(model, query, s)?;
        let lcp = common_prefix_len(query, s);
        let better = match best {
            None => true,
            Some((_, bl, bm)) => metric > bm || (metric == bm && lcp > bl),
        };
        if better {
            best = Some((id, lcp, metric));
        }
    }
    Ok(best)
}

pub fn trie_rows(options: &VerifyOptions) -> Result<Vec<ClaimRow>> {
    let config = ModelConfig {
        vocab_size: options.trie_vocab,
        ..with_context(&options.model, options.trie_query_len)
    };
    let model = Arc::new(Model::build(config)?);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut sessions = BTreeMap::new();
    let mut index = PrefixIndex::new(Arc::clone(&model));
    for id in 0..options.trie_sessions as SessionId {
        let len = rng.random_range(1..=options.trie_query_len);
        let seq: Vec<Token> = (0..len)
            .map(|_| rng.random_range(0..options.trie_vocab as Token))
            .collect();
        index.insert(id, seq.clone())?;
        sessions.insert(id, TokenSeq(seq));
    }
    let mut queries = 0u64;
    let mut mismatches = 0u64;
    for len in 0..=options.trie_query_len {
        for q in all_sequences(options.trie_vocab, len) {
            queries += 1;
            let fast = index
                .best_match(&q)
                .map(|m| (m.session, m.shared_prefix_len, m.metric));
            if fast != brute_force_best_match(&model, &sessions, &q)? {
                mismatches += 1;
            }
        }
    }
    Ok(vec![ClaimRow::new(
        "trie_best_match_oracle",
        mismatches == 0,
        0.0 - mismatches as f64,
        format!(
            "queries={queries} mismatches={mismatches} sessions={}",
            options.trie_sessions
        ),
    )])
}

pub fn determinism_rows(options: &VerifyOptions) -> Result<Vec<ClaimRow>> {
    let run = || -> Result<(Vec<u8>, String)> {
        let (model, w) = roundtrip_workload(options)?;
        let r = run_compression(
            &model,
            &w.sessions,
            &ClusterSettings {
                threshold: w.suggested_threshold.max(0.0),
                ..ClusterSettings::default()
            },
            &CodecConfig::default(),
        )?;
        Ok((
            r.bytes.clone(),
            r.storage.render(crate::report::Format::Records),
        ))
    };
    let a = run()?;
    let b = run()?;
    let same = a == b;
    Ok(vec![ClaimRow::new(
        "deterministic_output",
        same,
        if same { 0.0 } else { -1.0 },
        format!("container_bytes={} identical={same}", a.0.len()),
    )])
}
