//! Top-k draft acceptance versus covered probability mass.
//!
//! The draft is the model's distribution renormalized on its top-k tokens.
//! Its acceptance rate under speculative sampling, `Σ_t min(P_draft, P)`, is
//! computed directly and compared against `Z_k`, the top-k mass. The same
//! top-k set drives the conditional KV variance checks.

use crate::enumerate::map_contexts;
use crate::error::{Error, Result};
use crate::model::{lipschitz_estimate, Model, Token};
use crate::predictor::{weighted_mean, Candidates};
use crate::report::Table;

use super::residual::tokens_label;

/// Absolute tolerance for `α = Z_k` and for `Z_|V| = 1`.
pub const DUALITY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DualityReport {
    pub k: usize,
    pub max_len: usize,
    pub contexts: u64,
    /// Largest `|α − Z_k|`.
    pub max_gap: f64,
    pub gap_context: Vec<Token>,
    /// Largest `|α − 1|`; only meaningful when `k = |V|`.
    pub max_gap_to_one: f64,
    pub full_vocabulary: bool,
    pub mean_acceptance: f64,
    /// Contexts where `Var[F | top-k] ≤ Lip² · Var[E | top-k]` failed.
    pub lipschitz_violations: u64,
    /// Contexts where `Var[F | top-k] ≤ Lip² · C_E² / 4` failed.
    pub diameter_violations: u64,
    /// Largest `Var[F | top-k]`.
    pub max_topk_variance: f64,
    pub diameter_bound: f64,
}

impl DualityReport {
    pub fn acceptance_matches(&self) -> bool {
        self.max_gap <= DUALITY_TOLERANCE
            && (!self.full_vocabulary || self.max_gap_to_one <= DUALITY_TOLERANCE)
    }

    pub fn variance_bounded(&self) -> bool {
        self.lipschitz_violations == 0 && self.diameter_violations == 0
    }

    pub fn table(reports: &[DualityReport]) -> Table {
        let mut t = Table::new([
            "k",
            "contexts",
            "max_gap",
            "max_gap_to_one",
            "mean_acceptance",
            "lipschitz_violations",
            "diameter_violations",
            "worst_context",
        ]);
        for r in reports {
            t.push([
                r.k.to_string(),
                r.contexts.to_string(),
                format!("{:.3e}", r.max_gap),
                if r.full_vocabulary {
                    format!("{:.3e}", r.max_gap_to_one)
                } else {
                    "-".into()
                },
                format!("{:.9}", r.mean_acceptance),
                r.lipschitz_violations.to_string(),
                r.diameter_violations.to_string(),
                tokens_label(&r.gap_context),
            ]);
        }
        t
    }
}

struct PerContext {
    context: Vec<Token>,
    gap: f64,
    gap_to_one: f64,
    acceptance: f64,
    lipschitz_ok: bool,
    diameter_ok: bool,
    topk_variance: f64,
}

fn variance(weights: &[f64], vectors: &[Vec<f64>]) -> f64 {
    let mean = weighted_mean(weights, vectors);
    weights
        .iter()
        .zip(vectors)
        .map(|(w, v)| {
            w * v
                .iter()
                .zip(&mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum()
}

/// Checks the top-k duality on every context of length `0..=max_len`.
pub fn verify_duality(model: &Model, k: usize, max_len: usize) -> Result<DualityReport> {
    let vocab = model.vocab_size();
    if k == 0 || k > vocab {
        return Err(Error::InvalidArgument(format!("k={k} outside 1..={vocab}")));
    }
    let lip = lipschitz_estimate(model, max_len)?.kv_lipschitz();
    let c_e = model.embedding_diameter();
    let diameter_bound = lip * lip * c_e * c_e / 4.0;

    let rows = map_contexts(model, max_len, |state| {
        let cands = Candidates::at(model, state);
        let dist = &cands.dist;
        let top = dist.top_k(k);
        let z: f64 = top.iter().map(|&t| dist.prob(t)).sum();
        let mut draft = vec![0.0; vocab];
        for &t in &top {
            draft[t as usize] = dist.prob(t) / z;
        }
        let acceptance: f64 = draft.iter().zip(dist.probs()).map(|(q, p)| q.min(*p)).sum();

        let weights: Vec<f64> = top.iter().map(|&t| draft[t as usize]).collect();
        let kvs: Vec<Vec<f64>> = top.iter().map(|&t| cands.kvs[t as usize].clone()).collect();
        let embs: Vec<Vec<f64>> = top.iter().map(|&t| model.embedding(t).to_vec()).collect();
        let topk_variance = variance(&weights, &kvs);
        let emb_variance = variance(&weights, &embs);
        PerContext {
            context: state.tokens().to_vec(),
            gap: (acceptance - z).abs(),
            gap_to_one: (acceptance - 1.0).abs(),
            acceptance,
            lipschitz_ok: topk_variance <= lip * lip * emb_variance,
            diameter_ok: topk_variance <= diameter_bound,
            topk_variance,
        }
    })?;

    let mut report = DualityReport {
        k,
        max_len,
        contexts: rows.len() as u64,
        max_gap: 0.0,
        gap_context: Vec::new(),
        max_gap_to_one: 0.0,
        full_vocabulary: k == vocab,
        mean_acceptance: 0.0,
        lipschitz_violations: 0,
        diameter_violations: 0,
        max_topk_variance: 0.0,
        diameter_bound,
    };
    for row in rows {
        if row.gap > report.max_gap {
            report.max_gap = row.gap;
            report.gap_context = row.context;
        }
        report.max_gap_to_one = report.max_gap_to_one.max(row.gap_to_one);
        report.mean_acceptance += row.acceptance;
        report.lipschitz_violations += u64::from(!row.lipschitz_ok);
        report.diameter_violations += u64::from(!row.diameter_ok);
        report.max_topk_variance = report.max_topk_variance.max(row.topk_variance);
    }
    report.mean_acceptance /= report.contexts as f64;
    Ok(report)
}
