//! Residual identities and entropy-controlled bounds on every context.
//!
//! Four checks per context, each as `lhs ≤ rhs` (or `|lhs − rhs| ≤ tol`):
//! the second-moment identity `E‖R‖² = Var[F]`, the residual norm bound,
//! the diameter bound on embedding variance, and the entropy coupling bound
//! on embedding variance.

use std::f64::consts::LN_2;

use crate::enumerate::map_contexts;
use crate::error::Result;
use crate::model::{l2_norm, lipschitz_estimate, Model, Token};
use crate::predictor::{weighted_mean, Candidates};
use crate::report::Table;

/// Absolute tolerance of the second-moment identity.
pub const IDENTITY_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BoundCheck {
    /// `E‖R‖² = Var[F]`, computed along two independent routes.
    SecondMoment,
    /// `E‖R‖ ≤ ½ · Lip · C_E · √min(1, 4 H ln 2)`.
    ResidualNorm,
    /// `Var[E(t)] ≤ C_E² / 4`.
    DiameterVariance,
    /// `Var[E(t)] ≤ C_E² · H · ln 2`.
    EntropyCoupling,
}

impl BoundCheck {
    pub const ALL: [BoundCheck; 4] = [
        Self::SecondMoment,
        Self::ResidualNorm,
        Self::DiameterVariance,
        Self::EntropyCoupling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::SecondMoment => "second_moment_identity",
            Self::ResidualNorm => "residual_norm_bound",
            Self::DiameterVariance => "diameter_variance_bound",
            Self::EntropyCoupling => "entropy_coupling_bound",
        }
    }
}

/// Measured quantities at one context.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextBounds {
    pub context: Vec<Token>,
    pub entropy: f64,
    /// `Σ_t P(t) ‖F(t) − K̂V‖²` from the per-token residuals.
    pub mean_sq_residual: f64,
    /// `E‖F‖² − ‖E F‖²`.
    pub kv_variance: f64,
    pub mean_residual_norm: f64,
    pub norm_bound: f64,
    pub embedding_variance: f64,
    pub diameter_bound: f64,
    pub coupling_bound: f64,
}

impl ContextBounds {
    pub fn holds(&self, check: BoundCheck) -> bool {
        match check {
            BoundCheck::SecondMoment => {
                (self.mean_sq_residual - self.kv_variance).abs() <= IDENTITY_TOLERANCE
            }
            BoundCheck::ResidualNorm => self.mean_residual_norm <= self.norm_bound,
            BoundCheck::DiameterVariance => self.embedding_variance <= self.diameter_bound,
            BoundCheck::EntropyCoupling => self.embedding_variance <= self.coupling_bound,
        }
    }

    /// `rhs − lhs` for the inequalities; `tol − |gap|` for the identity.
    pub fn margin(&self, check: BoundCheck) -> f64 {
        match check {
            BoundCheck::SecondMoment => {
                IDENTITY_TOLERANCE - (self.mean_sq_residual - self.kv_variance).abs()
            }
            BoundCheck::ResidualNorm => self.norm_bound - self.mean_residual_norm,
            BoundCheck::DiameterVariance => self.diameter_bound - self.embedding_variance,
            BoundCheck::EntropyCoupling => self.coupling_bound - self.embedding_variance,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckSummary {
    pub check: BoundCheck,
    pub passed: u64,
    pub failed: u64,
    /// Smallest margin seen; negative when the check failed somewhere.
    pub worst_margin: f64,
    pub worst_context: Vec<Token>,
}

impl CheckSummary {
    pub fn all_pass(&self) -> bool {
        self.failed == 0
    }

    pub fn pass_rate(&self) -> f64 {
        self.passed as f64 / (self.passed + self.failed).max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBoundsReport {
    pub max_len: usize,
    pub lipschitz: f64,
    pub embedding_diameter: f64,
    pub contexts: Vec<ContextBounds>,
    pub summaries: Vec<CheckSummary>,
}

impl ResidualBoundsReport {
    pub fn summary(&self, check: BoundCheck) -> &CheckSummary {
        self.summaries
            .iter()
            .find(|s| s.check == check)
            .expect("every check is summarized")
    }

    pub fn all_pass(&self) -> bool {
        self.summaries.iter().all(CheckSummary::all_pass)
    }

    pub fn summary_table(&self) -> Table {
        let mut t = Table::new(["check", "passed", "failed", "worst_margin", "worst_context"]);
        for s in &self.summaries {
            t.push([
                s.check.name().to_string(),
                s.passed.to_string(),
                s.failed.to_string(),
                format!("{:.6e}", s.worst_margin),
                tokens_label(&s.worst_context),
            ]);
        }
        t
    }

    /// One row per context.
    pub fn table(&self) -> Table {
        let mut t = Table::new([
            "context",
            "entropy",
            "mean_sq_residual",
            "kv_variance",
            "mean_residual_norm",
            "norm_bound",
            "embedding_variance",
            "diameter_bound",
            "coupling_bound",
        ]);
        for c in &self.contexts {
            t.push([
                tokens_label(&c.context),
                format!("{:.9}", c.entropy),
                format!("{:.9}", c.mean_sq_residual),
                format!("{:.9}", c.kv_variance),
                format!("{:.9}", c.mean_residual_norm),
                format!("{:.9}", c.norm_bound),
                format!("{:.9}", c.embedding_variance),
                format!("{:.9}", c.diameter_bound),
                format!("{:.9}", c.coupling_bound),
            ]);
        }
        t
    }
}

pub(crate) fn tokens_label(tokens: &[Token]) -> String {
    if tokens.is_empty() {
        return "-".into();
    }
    tokens
        .iter()
        .map(Token::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Checks all four bounds on every context of length `0..=max_len`.
///
/// `Lip` is the per-layer chain estimate over the same contexts and `C_E` is
/// the embedding diameter.
pub fn verify_residual_bounds(model: &Model, max_len: usize) -> Result<ResidualBoundsReport> {
    let lipschitz = lipschitz_estimate(model, max_len)?.kv_lipschitz();
    let c_e = model.embedding_diameter();
    let embeddings: Vec<Vec<f64>> = (0..model.vocab_size())
        .map(|t| model.embedding(t as Token).to_vec())
        .collect();

    let contexts = map_contexts(model, max_len, |state| {
        let cands = Candidates::at(model, state);
        let probs = cands.dist.probs();
        let prediction = weighted_mean(probs, &cands.kvs);
        let mut mean_sq_residual = 0.0;
        let mut mean_residual_norm = 0.0;
        let mut second_moment = 0.0;
        for (p, kv) in probs.iter().zip(&cands.kvs) {
            let r: Vec<f64> = kv.iter().zip(&prediction).map(|(a, b)| a - b).collect();
            let norm = l2_norm(&r);
            mean_sq_residual += p * norm * norm;
            mean_residual_norm += p * norm;
            second_moment += p * kv.iter().map(|x| x * x).sum::<f64>();
        }
        let kv_variance = second_moment - prediction.iter().map(|x| x * x).sum::<f64>();
        let e_mean = weighted_mean(probs, &embeddings);
        let embedding_variance: f64 = probs
            .iter()
            .zip(&embeddings)
            .map(|(p, e)| {
                p * e
                    .iter()
                    .zip(&e_mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum();
        let entropy = cands.dist.entropy();
        ContextBounds {
            context: state.tokens().to_vec(),
            entropy,
            mean_sq_residual,
            kv_variance,
            mean_residual_norm,
            norm_bound: 0.5 * lipschitz * c_e * (4.0 * entropy * LN_2).min(1.0).sqrt(),
            embedding_variance,
            diameter_bound: c_e * c_e / 4.0,
            coupling_bound: c_e * c_e * entropy * LN_2,
        }
    })?;

    let summaries = BoundCheck::ALL
        .iter()
        .map(|&check| {
            let mut s = CheckSummary {
                check,
                passed: 0,
                failed: 0,
                worst_margin: f64::INFINITY,
                worst_context: Vec::new(),
            };
            for c in &contexts {
                if c.holds(check) {
                    s.passed += 1;
                } else {
                    s.failed += 1;
                }
                let m = c.margin(check);
                if m < s.worst_margin {
                    s.worst_margin = m;
                    s.worst_context = c.context.clone();
                }
            }
            s
        })
        .collect();

    Ok(ResidualBoundsReport {
        max_len,
        lipschitz,
        embedding_diameter: c_e,
        contexts,
        summaries,
    })
}
