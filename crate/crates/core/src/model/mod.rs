//! A deterministic, seeded miniature decoder-only transformer.
//!
//! The model is small enough that every sequence up to a few tokens can be
//! enumerated, which lets the analyzer compute entropies exactly. Inputs at
//! position `i` are `E(t_i) + P(i)` with a fixed sinusoidal `P`; position 0
//! holds a learned start vector so the first token also has a distribution.
//! Layers are attention + GELU MLP with residual connections and no
//! normalization, so layer-1 keys and values are affine in the embedding.
//!
//! Decoding is incremental: a [`DecodeState`] carries the per-layer key/value
//! cache and the distribution of the next token. [`Model::forward`] is a
//! sequence of [`Model::push`] calls, so a prefix's KV tensor is always a
//! bit-identical prefix of any extension's.

mod config;
mod lipschitz;
mod weights;

pub use config::{common_prefix_len, ModelConfig, Token, TokenSeq};
pub use lipschitz::{lipschitz_estimate, LipschitzEstimate};
pub use weights::{LayerWeights, Weights, EMBEDDING_STD, LM_HEAD_SCALE, MATRIX_SCALE};

use crate::error::{Error, Result};

/// Next-token probabilities produced by the LM head.
#[derive(Debug, Clone, PartialEq)]
pub struct NextTokenDist(Vec<f64>);

impl NextTokenDist {
    pub fn from_probs(probs: Vec<f64>) -> Self {
        Self(probs)
    }

    fn from_logits(logits: &[f64]) -> Self {
        Self(softmax(logits))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn prob(&self, token: Token) -> f64 {
        self.0[token as usize]
    }

    pub fn vocab_size(&self) -> usize {
        self.0.len()
    }

    /// Shannon entropy in bits.
    pub fn entropy(&self) -> f64 {
        entropy_bits(&self.0)
    }

    /// `-log2 P(token)`.
    pub fn surprisal(&self, token: Token) -> f64 {
        -self.prob(token).log2()
    }

    /// The `k` most probable tokens, descending, ties broken by lower id.
    pub fn top_k(&self, k: usize) -> Vec<Token> {
        let mut order: Vec<Token> = (0..self.0.len() as Token).collect();
        order.sort_by(|&a, &b| {
            self.0[b as usize]
                .total_cmp(&self.0[a as usize])
                .then(a.cmp(&b))
        });
        order.truncate(k);
        order
    }

    pub fn argmax(&self) -> Token {
        self.top_k(1)[0]
    }
}

/// Shannon entropy in bits of a probability vector; zero entries contribute 0.
pub fn entropy_bits(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.log2())
        .sum()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn matvec(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (row, o) in w.chunks_exact(cols).zip(out.iter_mut()) {
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-position, per-layer key/value vectors.
///
/// Position `i` (0-based) stores, for each layer, `model_dim` key components
/// followed by `model_dim` value components.
#[derive(Debug, Clone, PartialEq)]
pub struct KvTensor {
    layers: usize,
    model_dim: usize,
    data: Vec<f64>,
}

impl KvTensor {
    pub fn new(layers: usize, model_dim: usize) -> Self {
        Self {
            layers,
            model_dim,
            data: Vec::new(),
        }
    }

    pub fn for_model(config: &ModelConfig) -> Self {
        Self::new(config.num_layers, config.model_dim())
    }

    /// Scalars per position.
    pub fn stride(&self) -> usize {
        2 * self.layers * self.model_dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers
    }

    pub fn model_dim(&self) -> usize {
        self.model_dim
    }

    pub fn n_positions(&self) -> usize {
        self.data.len() / self.stride()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn position(&self, i: usize) -> &[f64] {
        let s = self.stride();
        &self.data[i * s..(i + 1) * s]
    }

    /// Key and value of `layer` at position `i`, concatenated.
    pub fn layer(&self, i: usize, layer: usize) -> &[f64] {
        let block = 2 * self.model_dim;
        &self.position(i)[layer * block..(layer + 1) * block]
    }

    pub fn key(&self, i: usize, layer: usize) -> &[f64] {
        &self.layer(i, layer)[..self.model_dim]
    }

    pub fn value(&self, i: usize, layer: usize) -> &[f64] {
        &self.layer(i, layer)[self.model_dim..]
    }

    pub fn push_position(&mut self, kv: &[f64]) {
        assert_eq!(kv.len(), self.stride(), "KV position has wrong width");
        self.data.extend_from_slice(kv);
    }

    pub fn prefix(&self, n: usize) -> KvTensor {
        KvTensor {
            layers: self.layers,
            model_dim: self.model_dim,
            data: self.data[..n * self.stride()].to_vec(),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Largest absolute componentwise difference to `other`.
    pub fn max_abs_diff(&self, other: &KvTensor) -> f64 {
        assert_eq!(
            self.data.len(),
            other.data.len(),
            "KV tensors differ in size"
        );
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Realized surprisal and conditional entropy per position, in bits.
#[derive(Debug, Clone, PartialEq)]
pub struct SurprisalTrace {
    pub surprisal: Vec<f64>,
    pub entropy: Vec<f64>,
}

impl SurprisalTrace {
    pub fn mean_surprisal(&self) -> f64 {
        mean(&self.surprisal)
    }

    pub fn mean_entropy(&self) -> f64 {
        mean(&self.entropy)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Incremental decoding state: cached keys/values (including the start
/// position) and the next-token distribution after every prefix.
#[derive(Debug, Clone)]
pub struct DecodeState {
    tokens: Vec<Token>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    dists: Vec<NextTokenDist>,
}

impl DecodeState {
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Distribution of the token following the current prefix.
    pub fn next_dist(&self) -> &NextTokenDist {
        self.dists
            .last()
            .expect("state always holds the start distribution")
    }

    /// Distribution of token `i + 1` given the first `i` tokens.
    pub fn dist_after(&self, i: usize) -> &NextTokenDist {
        &self.dists[i]
    }

    /// Drops tokens beyond `len`.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.tokens.len() {
            return;
        }
        let dim = self.keys[0].len() / (self.tokens.len() + 1);
        self.tokens.truncate(len);
        for (k, v) in self.keys.iter_mut().zip(&mut self.values) {
            k.truncate((len + 1) * dim);
            v.truncate((len + 1) * dim);
        }
        self.dists.truncate(len + 1);
    }
}

/// Output of one decoding step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// KV state of the new position (`kv_stride` scalars).
    pub kv: Vec<f64>,
    /// Distribution of the token after the new position.
    pub dist: NextTokenDist,
    /// Residual-stream input of every layer plus the final output
    /// (`num_layers + 1` vectors), recorded only by traced steps.
    pub stream: Vec<Vec<f64>>,
}

/// The toy decoder. Immutable after construction; all methods are pure.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
    positional: Vec<f64>,
    fingerprint: u64,
    start: DecodeState,
}

impl Model {
    /// Builds the seeded model and refuses seeds whose layer-1 keys fail to
    /// separate some pair of tokens.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Self::from_weights(config, Weights::seeded(&config))
    }

    /// Builds a model around explicit weights (used for constructed models).
    pub fn from_weights(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        weights.check_shape(&config)?;
        let dim = config.model_dim();
        let positional = sinusoidal(config.max_context + 1, dim);
        let fingerprint = weights.fingerprint();
        let empty = DecodeState {
            tokens: Vec::new(),
            keys: vec![Vec::new(); config.num_layers],
            values: vec![Vec::new(); config.num_layers],
            dists: Vec::new(),
        };
        let mut model = Self {
            config,
            weights,
            positional,
            fingerprint,
            start: empty,
        };
        let bos = model.weights.bos.clone();
        let mut start = model.start.clone();
        let out = model.step_from_input(&start, &bos, 0, false);
        model.commit(&mut start, None, out);
        model.start = start;
        model.check_layer1_injectivity()?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn embedding(&self, token: Token) -> &[f64] {
        self.weights
            .embedding_row(token as usize, self.config.model_dim())
    }

    /// State before any token: only the start position is cached.
    pub fn start(&self) -> DecodeState {
        self.start.clone()
    }

    /// Decodes `tokens` from the start state.
    pub fn state_for(&self, tokens: &[Token]) -> Result<DecodeState> {
        self.config.check_tokens(tokens)?;
        let mut state = self.start();
        for &t in tokens {
            self.push(&mut state, t);
        }
        Ok(state)
    }

    /// Appends `token` to `state` and returns the new position's KV.
    ///
    /// Panics if the token is out of range or the context is full; use
    /// [`Model::state_for`] or [`Model::forward`] for checked input.
    pub fn push(&self, state: &mut DecodeState, token: Token) -> Vec<f64> {
        let out = self.peek(state, token);
        let kv = out.kv.clone();
        self.commit(state, Some(token), out);
        kv
    }

    /// Computes the next position for `token` without modifying `state`.
    pub fn peek(&self, state: &DecodeState, token: Token) -> StepOutput {
        self.step(state, token, false)
    }

    /// Like [`Model::peek`] but also records every layer's residual-stream input.
    pub fn peek_traced(&self, state: &DecodeState, token: Token) -> StepOutput {
        self.step(state, token, true)
    }

    /// KV vectors of the next position for every vocabulary token.
    pub fn candidates(&self, state: &DecodeState) -> Vec<Vec<f64>> {
        (0..self.config.vocab_size as Token)
            .map(|t| self.peek(state, t).kv)
            .collect()
    }

    fn step(&self, state: &DecodeState, token: Token, trace: bool) -> StepOutput {
        let pos = state.tokens.len() + 1;
        assert!(
            (token as usize) < self.config.vocab_size,
            "token {token} out of range"
        );
        assert!(pos <= self.config.max_context, "context is full");
        let dim = self.config.model_dim();
        let x: Vec<f64> = self
            .embedding(token)
            .iter()
            .zip(&self.positional[pos * dim..(pos + 1) * dim])
            .map(|(e, p)| e + p)
            .collect();
        self.step_from_input(state, &x, pos, trace)
    }

    fn step_from_input(
        &self,
        state: &DecodeState,
        input: &[f64],
        pos: usize,
        trace: bool,
    ) -> StepOutput {
        let cfg = &self.config;
        let dim = cfg.model_dim();
        let head_dim = cfg.head_dim;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut x: Vec<f64> = input.to_vec();
        if pos == 0 {
            // start position: no positional offset beyond P(0)
            for (xi, p) in x.iter_mut().zip(&self.positional[..dim]) {
                *xi += p;
            }
        }
        let mut kv = Vec::with_capacity(cfg.kv_stride());
        let mut stream = Vec::new();
        let mut q = vec![0.0; dim];
        let mut k = vec![0.0; dim];
        let mut v = vec![0.0; dim];
        let mut attn = vec![0.0; dim];
        let mut proj = vec![0.0; dim];
        let mut hidden = vec![0.0; cfg.mlp_dim()];
        for (l, w) in self.weights.layers.iter().enumerate() {
            if trace {
                stream.push(x.clone());
            }
            matvec(&w.wq, dim, &x, &mut q);
            matvec(&w.wk, dim, &x, &mut k);
            matvec(&w.wv, dim, &x, &mut v);
            kv.extend_from_slice(&k);
            kv.extend_from_slice(&v);

            let past_k = &state.keys[l];
            let past_v = &state.values[l];
            let n_past = past_k.len() / dim;
            for h in 0..cfg.num_heads {
                let span = h * head_dim..(h + 1) * head_dim;
                let qh = &q[span.clone()];
                let mut scores: Vec<f64> = (0..n_past)
                    .map(|j| dot(qh, &past_k[j * dim..][span.clone()]) * scale)
                    .collect();
                scores.push(dot(qh, &k[span.clone()]) * scale);
                let weights = softmax(&scores);
                let out = &mut attn[span.clone()];
                out.iter_mut().for_each(|o| *o = 0.0);
                for (j, a) in weights.iter().enumerate() {
                    let vj = if j < n_past {
                        &past_v[j * dim..][span.clone()]
                    } else {
                        &v[span.clone()]
                    };
                    for (o, vv) in out.iter_mut().zip(vj) {
                        *o += a * vv;
                    }
                }
            }
            matvec(&w.wo, dim, &attn, &mut proj);
            for (xi, p) in x.iter_mut().zip(&proj) {
                *xi += p;
            }
            matvec(&w.w1, dim, &x, &mut hidden);
            hidden.iter_mut().for_each(|h| *h = gelu(*h));
            matvec(&w.w2, cfg.mlp_dim(), &hidden, &mut proj);
            for (xi, p) in x.iter_mut().zip(&proj) {
                *xi += p;
            }
        }
        if trace {
            stream.push(x.clone());
        }
        let mut logits = vec![0.0; cfg.vocab_size];
        matvec(&self.weights.lm_head, dim, &x, &mut logits);
        StepOutput {
            kv,
            dist: NextTokenDist::from_logits(&logits),
            stream,
        }
    }

    fn commit(&self, state: &mut DecodeState, token: Option<Token>, out: StepOutput) {
        let block = 2 * self.config.model_dim();
        let dim = self.config.model_dim();
        for (l, chunk) in out.kv.chunks_exact(block).enumerate() {
            state.keys[l].extend_from_slice(&chunk[..dim]);
            state.values[l].extend_from_slice(&chunk[dim..]);
        }
        if let Some(t) = token {
            state.tokens.push(t);
        }
        state.dists.push(out.dist);
    }

    /// Runs the decoder over `tokens`. Returns the KV tensor (one entry per
    /// position) and `len + 1` distributions, where entry `i` conditions on
    /// the first `i` tokens.
    pub fn forward(&self, tokens: &[Token]) -> Result<(KvTensor, Vec<NextTokenDist>)> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        self.config.check_tokens(tokens)?;
        let mut state = self.start();
        let mut kv = KvTensor::for_model(&self.config);
        for &t in tokens {
            kv.push_position(&self.push(&mut state, t));
        }
        Ok((kv, state.dists))
    }

    /// Chain-rule probability of `tokens`; the empty sequence has probability 1.
    pub fn sequence_prob(&self, tokens: &[Token]) -> Result<f64> {
        self.config.check_tokens(tokens)?;
        let mut state = self.start();
        let mut p = 1.0;
        for &t in tokens {
            p *= state.next_dist().prob(t);
            self.push(&mut state, t);
        }
        Ok(p)
    }

    pub fn surprisal_trace(&self, tokens: &[Token]) -> Result<SurprisalTrace> {
        self.config.check_tokens(tokens)?;
        let mut state = self.start();
        let mut trace = SurprisalTrace {
            surprisal: Vec::with_capacity(tokens.len()),
            entropy: Vec::with_capacity(tokens.len()),
        };
        for &t in tokens {
            let dist = state.next_dist();
            trace.surprisal.push(dist.surprisal(t));
            trace.entropy.push(dist.entropy());
            self.push(&mut state, t);
        }
        Ok(trace)
    }

    /// Layer-1 keys at position `pos` depend only on the token there, so
    /// checking every position with an arbitrary context covers every context.
    fn check_layer1_injectivity(&self) -> Result<()> {
        let dim = self.config.model_dim();
        let vocab = self.config.vocab_size;
        let wk = &self.weights.layers[0].wk;
        let mut keys = vec![vec![0.0; dim]; vocab];
        for pos in 1..=self.config.max_context {
            let p = &self.positional[pos * dim..(pos + 1) * dim];
            for (t, key) in keys.iter_mut().enumerate() {
                let x: Vec<f64> = self
                    .weights
                    .embedding_row(t, dim)
                    .iter()
                    .zip(p)
                    .map(|(e, p)| e + p)
                    .collect();
                matvec(wk, dim, &x, key);
            }
            for a in 0..vocab {
                for b in a + 1..vocab {
                    if keys[a] == keys[b] {
                        return Err(Error::InjectivityViolation {
                            seed: self.config.seed,
                            position: pos,
                            a: a as Token,
                            b: b as Token,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Largest pairwise embedding distance `C_E`.
    pub fn embedding_diameter(&self) -> f64 {
        let v = self.config.vocab_size as Token;
        let mut best: f64 = 0.0;
        for a in 0..v {
            for b in a + 1..v {
                best = best.max(l2_dist(self.embedding(a), self.embedding(b)));
            }
        }
        best
    }
}

/// Euclidean distance between two equal-length vectors.
pub fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sinusoidal(positions: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; positions * dim];
    for pos in 0..positions {
        for j in 0..dim / 2 {
            let freq = 10_000f64.powf(-(2.0 * j as f64) / dim as f64);
            let angle = pos as f64 * freq;
            out[pos * dim + 2 * j] = angle.sin();
            out[pos * dim + 2 * j + 1] = angle.cos();
        }
        if dim % 2 == 1 {
            out[pos * dim + dim - 1] = (pos as f64).sin();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        Model::build(ModelConfig::default()).unwrap()
    }

    #[test]
    fn same_seed_same_weights() {
        let a = model();
        let b = model();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.weights(), b.weights());
        let other = Model::build(ModelConfig {
            seed: 43,
            ..ModelConfig::default()
        })
        .unwrap();
        assert_ne!(a.fingerprint(), other.fingerprint());
    }

    #[test]
    fn rejects_degenerate_configs() {
        for cfg in [
            ModelConfig {
                vocab_size: 1,
                ..ModelConfig::default()
            },
            ModelConfig {
                num_layers: 0,
                ..ModelConfig::default()
            },
            ModelConfig {
                head_dim: 0,
                ..ModelConfig::default()
            },
        ] {
            assert!(matches!(Model::build(cfg), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let m = model();
        assert_eq!(m.forward(&[]).unwrap_err(), Error::EmptySequence);
        assert!(matches!(
            m.forward(&[0; 9]),
            Err(Error::SequenceTooLong { len: 9, max: 8 })
        ));
        assert!(matches!(
            m.forward(&[1, 8]),
            Err(Error::TokenOutOfRange { token: 8, .. })
        ));
    }

    #[test]
    fn forward_is_prefix_stable_and_deterministic() {
        let m = model();
        let s = [3, 1, 4, 1, 5];
        let (kv_a, d_a) = m.forward(&s).unwrap();
        let (kv_b, d_b) = m.forward(&s).unwrap();
        assert_eq!(kv_a, kv_b);
        assert_eq!(d_a, d_b);
        let (kv_ext, d_ext) = m.forward(&[3, 1, 4, 1, 5, 2]).unwrap();
        assert_eq!(kv_ext.prefix(5), kv_a);
        assert_eq!(&d_ext[..6], &d_a[..]);
        assert_eq!(d_a.len(), s.len() + 1);
    }

    #[test]
    fn distributions_normalized() {
        let m = model();
        let (_, dists) = m.forward(&[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        for d in &dists {
            let sum: f64 = d.probs().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(d.entropy() >= 0.0 && d.entropy() <= 3.0 + 1e-12);
        }
    }

    #[test]
    fn sequence_prob_chain_rule() {
        let m = model();
        assert_eq!(m.sequence_prob(&[]).unwrap(), 1.0);
        let s = [2, 7, 1];
        let p_s = m.sequence_prob(&s).unwrap();
        let state = m.state_for(&s).unwrap();
        let p_ext = m.sequence_prob(&[2, 7, 1, 4]).unwrap();
        assert_eq!(p_ext, p_s * state.next_dist().prob(4));
        assert!(p_s > 0.0 && p_s <= 1.0);
    }

    #[test]
    fn surprisal_of_uniform_and_point_mass() {
        let uniform = NextTokenDist::from_probs(vec![0.125; 8]);
        assert!((uniform.entropy() - 3.0).abs() < 1e-15);
        assert!((uniform.surprisal(5) - 3.0).abs() < 1e-15);
        let point = NextTokenDist::from_probs(vec![0.0, 1.0, 0.0]);
        assert_eq!(point.entropy(), 0.0);
        assert_eq!(point.surprisal(1), 0.0);
    }

    #[test]
    fn top_k_breaks_ties_by_id() {
        let d = NextTokenDist::from_probs(vec![0.2, 0.3, 0.2, 0.3]);
        assert_eq!(d.top_k(4), vec![1, 3, 0, 2]);
        assert_eq!(d.argmax(), 1);
    }

    #[test]
    fn state_truncate_restores_prefix() {
        let m = model();
        let mut s = m.state_for(&[1, 2, 3, 4]).unwrap();
        s.truncate(2);
        let fresh = m.state_for(&[1, 2]).unwrap();
        assert_eq!(s.tokens(), fresh.tokens());
        assert_eq!(s.next_dist(), fresh.next_dist());
        assert_eq!(m.peek(&s, 5).kv, m.peek(&fresh, 5).kv);
    }
}
