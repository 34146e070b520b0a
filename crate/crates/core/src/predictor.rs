//! Predicted KV vectors and residuals.
//!
//! At a context `t_<i`, every candidate token `t` yields a KV vector
//! `F(t_<i, t)`. The predicted vector is the model-weighted mean of those
//! candidates; the residual is the realized KV minus the prediction.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{entropy_bits, DecodeState, Model, NextTokenDist, Token};
use crate::report::Table;

/// Top-k size used when none is configured.
pub const DEFAULT_TOP_K: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PredictionMethod {
    #[default]
    Exact,
    TopK(usize),
    Linear,
}

impl fmt::Display for PredictionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Exact => f.write_str("exact"),
            Self::TopK(k) => write!(f, "topk{k}"),
            Self::Linear => f.write_str("linear"),
        }
    }
}

impl FromStr for PredictionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "linear" => Ok(Self::Linear),
            "topk" => Ok(Self::TopK(DEFAULT_TOP_K)),
            _ => s
                .strip_prefix("topk")
                .and_then(|k| k.parse().ok())
                .map(Self::TopK)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown predictor {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedKv {
    /// `kv_stride` components, laid out like one [`crate::model::KvTensor`] position.
    pub kv: Vec<f64>,
    pub method: PredictionMethod,
    /// Probability mass of the tokens the prediction averages over.
    pub mass: f64,
    /// Set when the linear fit was rank deficient and the exact mean was used.
    pub fell_back: bool,
}

/// Everything the next position can be: its distribution and the KV vector
/// of every candidate token.
#[derive(Debug, Clone)]
pub struct Candidates {
    pub dist: NextTokenDist,
    pub kvs: Vec<Vec<f64>>,
}

impl Candidates {
    pub fn at(model: &Model, state: &DecodeState) -> Self {
        Self {
            dist: state.next_dist().clone(),
            kvs: model.candidates(state),
        }
    }

    pub fn dim(&self) -> usize {
        self.kvs[0].len()
    }

    /// The candidate closest to `x` in L2; ties go to the lower token id.
    pub fn nearest(&self, x: &[f64]) -> Token {
        let mut best = (f64::INFINITY, 0);
        for (t, kv) in self.kvs.iter().enumerate() {
            let d: f64 = kv.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, t as Token);
            }
        }
        best.1
    }

    /// Exact `Var_{t~P}[F(t)]`, the expected squared distance to the mean.
    pub fn variance(&self) -> f64 {
        let mean = weighted_mean(self.dist.probs(), &self.kvs);
        self.dist
            .probs()
            .iter()
            .zip(&self.kvs)
            .map(|(p, kv)| p * sq_dist(kv, &mean))
            .sum()
    }

    pub fn predict(&self, model: &Model, method: PredictionMethod) -> Result<PredictedKv> {
        match method {
            PredictionMethod::Exact => Ok(PredictedKv {
                kv: weighted_mean(self.dist.probs(), &self.kvs),
                method,
                mass: 1.0,
                fell_back: false,
            }),
            PredictionMethod::TopK(k) => {
                if k == 0 || k > self.kvs.len() {
                    return Err(Error::InvalidArgument(format!(
                        "top-k size {k} outside 1..={}",
                        self.kvs.len()
                    )));
                }
                let top = self.dist.top_k(k);
                let mass: f64 = top.iter().map(|&t| self.dist.prob(t)).sum();
                let weights: Vec<f64> = top.iter().map(|&t| self.dist.prob(t) / mass).collect();
                let kvs: Vec<Vec<f64>> =
                    top.iter().map(|&t| self.kvs[t as usize].clone()).collect();
                Ok(PredictedKv {
                    kv: weighted_mean(&weights, &kvs),
                    method,
                    mass,
                    fell_back: false,
                })
            }
            PredictionMethod::Linear => {
                let fit = LinearFit::new(model, self);
                if fit.rank_deficient {
                    let mut exact = self.predict(model, PredictionMethod::Exact)?;
                    exact.method = method;
                    exact.fell_back = true;
                    return Ok(exact);
                }
                let dim = model.config().model_dim();
                let mut mean_e = vec![0.0; dim];
                for (t, p) in self.dist.probs().iter().enumerate() {
                    for (m, e) in mean_e.iter_mut().zip(model.embedding(t as Token)) {
                        *m += p * e;
                    }
                }
                Ok(PredictedKv {
                    kv: fit.eval(&mean_e),
                    method,
                    mass: 1.0,
                    fell_back: false,
                })
            }
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `Σ w_j · v_j`.
pub fn weighted_mean(weights: &[f64], vectors: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; vectors[0].len()];
    for (w, v) in weights.iter().zip(vectors) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    out
}

/// Least-squares affine map `F(t) ≈ c + A·E(t)` over every vocabulary token,
/// solved in the minimum-norm sense through an SVD.
#[derive(Debug, Clone)]
pub struct LinearFit {
    /// `(model_dim + 1) × kv_stride`; row 0 is `c`.
    coeffs: DMatrix<f64>,
    pub rank: usize,
    pub rank_deficient: bool,
    /// Root-sum-square fitting residual of each layer's key/value block.
    pub residual_per_layer: Vec<f64>,
}

impl LinearFit {
    pub fn new(model: &Model, cands: &Candidates) -> Self {
        let vocab = cands.kvs.len();
        let dim = model.config().model_dim();
        let stride = cands.dim();
        let x = DMatrix::from_fn(vocab, dim + 1, |r, c| {
            if c == 0 {
                1.0
            } else {
                model.embedding(r as Token)[c - 1]
            }
        });
        let y = DMatrix::from_fn(vocab, stride, |r, c| cands.kvs[r][c]);
        let svd = x.clone().svd(true, true);
        let max_sv = svd.singular_values.max();
        let tol = max_sv * (vocab.max(dim + 1) as f64) * f64::EPSILON;
        let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
        let coeffs = svd
            .solve(&y, tol)
            .expect("SVD computed with both singular vector sets");
        let fitted = &x * &coeffs;
        let block = stride / model.config().num_layers;
        let residual_per_layer = (0..model.config().num_layers)
            .map(|l| {
                let cols = l * block..(l + 1) * block;
                let mut ss = 0.0;
                for r in 0..vocab {
                    for c in cols.clone() {
                        let e = fitted[(r, c)] - y[(r, c)];
                        ss += e * e;
                    }
                }
                ss.sqrt()
            })
            .collect();
        Self {
            coeffs,
            rank,
            rank_deficient: rank < vocab.min(dim + 1),
            residual_per_layer,
        }
    }

    /// `c + A·e`.
    pub fn eval(&self, e: &[f64]) -> Vec<f64> {
        let mut row = DVector::zeros(e.len() + 1);
        row[0] = 1.0;
        for (i, v) in e.iter().enumerate() {
            row[i + 1] = *v;
        }
        (self.coeffs.transpose() * row).iter().copied().collect()
    }
}

fn context_state(model: &Model, context: &[Token]) -> Result<DecodeState> {
    if context.len() >= model.config().max_context {
        return Err(Error::SequenceTooLong {
            len: context.len() + 1,
            max: model.config().max_context,
        });
    }
    model.state_for(context)
}

pub fn predict(model: &Model, context: &[Token], method: PredictionMethod) -> Result<PredictedKv> {
    let state = context_state(model, context)?;
    Candidates::at(model, &state).predict(model, method)
}

pub fn predict_exact(model: &Model, context: &[Token]) -> Result<PredictedKv> {
    predict(model, context, PredictionMethod::Exact)
}

pub fn predict_topk(model: &Model, context: &[Token], k: usize) -> Result<PredictedKv> {
    predict(model, context, PredictionMethod::TopK(k))
}

pub fn predict_linear(model: &Model, context: &[Token]) -> Result<PredictedKv> {
    predict(model, context, PredictionMethod::Linear)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    /// `KV_i − K̂V_i`, laid out like one KV position.
    pub values: Vec<f64>,
    pub norm: f64,
    pub surprisal: f64,
    pub entropy: f64,
}

/// Residual at 1-based `position` of `seq`.
pub fn residual(
    model: &Model,
    seq: &[Token],
    position: usize,
    method: PredictionMethod,
) -> Result<Residual> {
    if position == 0 || position > seq.len() {
        return Err(Error::InvalidArgument(format!(
            "position {position} outside 1..={}",
            seq.len()
        )));
    }
    let state = model.state_for(&seq[..position - 1])?;
    let token = seq[position - 1];
    model.config().check_tokens(&[token])?;
    let cands = Candidates::at(model, &state);
    let pred = cands.predict(model, method)?;
    let values: Vec<f64> = cands.kvs[token as usize]
        .iter()
        .zip(&pred.kv)
        .map(|(a, b)| a - b)
        .collect();
    Ok(Residual {
        norm: values.iter().map(|v| v * v).sum::<f64>().sqrt(),
        values,
        surprisal: cands.dist.surprisal(token),
        entropy: cands.dist.entropy(),
    })
}

/// Exact spread of the next KV vector at one context and its
/// entropy-controlled upper bound.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualVariance {
    /// `Var[F]` restricted to each layer's key/value block.
    pub per_layer: Vec<f64>,
    pub total: f64,
    pub entropy: f64,
    /// `¼ · lip² · C_E² · min(1, 4 H ln 2)`.
    pub bound: f64,
}

impl ResidualVariance {
    pub fn holds(&self) -> bool {
        self.total <= self.bound
    }
}

pub fn variance_bound(lip: f64, c_e: f64, entropy: f64) -> f64 {
    0.25 * lip * lip * c_e * c_e * (4.0 * entropy * std::f64::consts::LN_2).min(1.0)
}

pub fn residual_variance_at(
    cands: &Candidates,
    layers: usize,
    lip: f64,
    c_e: f64,
) -> ResidualVariance {
    let mean = weighted_mean(cands.dist.probs(), &cands.kvs);
    let block = cands.dim() / layers;
    let per_layer: Vec<f64> = (0..layers)
        .map(|l| {
            let r = l * block..(l + 1) * block;
            cands
                .dist
                .probs()
                .iter()
                .zip(&cands.kvs)
                .map(|(p, kv)| p * sq_dist(&kv[r.clone()], &mean[r.clone()]))
                .sum()
        })
        .collect();
    let entropy = entropy_bits(cands.dist.probs());
    ResidualVariance {
        total: per_layer.iter().sum(),
        per_layer,
        entropy,
        bound: variance_bound(lip, c_e, entropy),
    }
}

pub fn residual_variance(
    model: &Model,
    context: &[Token],
    lip: f64,
    c_e: f64,
) -> Result<ResidualVariance> {
    let state = context_state(model, context)?;
    Ok(residual_variance_at(
        &Candidates::at(model, &state),
        model.config().num_layers,
        lip,
        c_e,
    ))
}

/// Per-position residual records `(position, h, H, |R|, variance, bound)`.
pub fn residual_trace(
    model: &Model,
    seq: &[Token],
    method: PredictionMethod,
    lip: f64,
    c_e: f64,
) -> Result<Table> {
    model.config().check_tokens(seq)?;
    let mut table = Table::new([
        "position",
        "surprisal",
        "entropy",
        "residual_norm",
        "variance",
        "bound",
    ]);
    let mut state = model.start();
    for (i, &t) in seq.iter().enumerate() {
        let cands = Candidates::at(model, &state);
        let pred = cands.predict(model, method)?;
        let norm = sq_dist(&cands.kvs[t as usize], &pred.kv).sqrt();
        let var = residual_variance_at(&cands, model.config().num_layers, lip, c_e);
        table.push([
            (i + 1).to_string(),
            format!("{:.9}", cands.dist.surprisal(t)),
            format!("{:.9}", cands.dist.entropy()),
            format!("{norm:.9}"),
            format!("{:.9}", var.total),
            format!("{:.9}", var.bound),
        ]);
        model.push(&mut state, t);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Model {
        Model::build(ModelConfig::default()).unwrap()
    }

    #[test]
    fn topk_full_equals_exact() {
        let m = model();
        let ctx = [1, 2];
        let exact = predict_exact(&m, &ctx).unwrap();
        let full = predict_topk(&m, &ctx, 8).unwrap();
        for (a, b) in exact.kv.iter().zip(&full.kv) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
        assert!((full.mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn top1_is_argmax_candidate() {
        let m = model();
        let state = m.state_for(&[4]).unwrap();
        let top = predict_topk(&m, &[4], 1).unwrap();
        let argmax = state.next_dist().argmax();
        assert_eq!(top.kv, m.peek(&state, argmax).kv);
        assert_eq!(top.mass, state.next_dist().prob(argmax));
    }

    #[test]
    fn topk_rejects_bad_k() {
        let m = model();
        assert!(predict_topk(&m, &[], 0).is_err());
        assert!(predict_topk(&m, &[], 9).is_err());
    }

    #[test]
    fn residual_position_checked() {
        let m = model();
        assert!(residual(&m, &[1, 2], 0, PredictionMethod::Exact).is_err());
        assert!(residual(&m, &[1, 2], 3, PredictionMethod::Exact).is_err());
        let r = residual(&m, &[1, 2], 2, PredictionMethod::Exact).unwrap();
        let (kv, _) = m.forward(&[1, 2]).unwrap();
        let pred = predict_exact(&m, &[1]).unwrap();
        for ((r, k), p) in r.values.iter().zip(kv.position(1)).zip(&pred.kv) {
            assert_eq!(*r, k - p);
        }
    }

    #[test]
    fn parses_methods() {
        assert_eq!(
            "exact".parse::<PredictionMethod>().unwrap(),
            PredictionMethod::Exact
        );
        assert_eq!(
            "topk3".parse::<PredictionMethod>().unwrap(),
            PredictionMethod::TopK(3)
        );
        assert_eq!(
            "topk".parse::<PredictionMethod>().unwrap(),
            PredictionMethod::TopK(4)
        );
        assert_eq!(
            "linear".parse::<PredictionMethod>().unwrap(),
            PredictionMethod::Linear
        );
        assert!("mean".parse::<PredictionMethod>().is_err());
        for m in [
            PredictionMethod::Exact,
            PredictionMethod::TopK(2),
            PredictionMethod::Linear,
        ] {
            assert_eq!(m.to_string().parse::<PredictionMethod>().unwrap(), m);
        }
    }

    #[test]
    fn zero_entropy_bound_is_zero() {
        assert_eq!(variance_bound(2.0, 3.0, 0.0), 0.0);
        assert_eq!(variance_bound(2.0, 3.0, 10.0), 9.0);
    }
}
