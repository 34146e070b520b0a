use std::hash::Hasher;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};

/// Standard deviation of token embedding and BOS entries.
pub const EMBEDDING_STD: f64 = 1.0;
/// Base scale of attention and MLP matrices, divided by sqrt(model_dim).
pub const MATRIX_SCALE: f64 = 0.5;
/// Base scale of the LM head, divided by sqrt(model_dim).
pub const LM_HEAD_SCALE: f64 = 3.0;

/// Attention and MLP parameters of one decoder layer. All matrices are
/// row-major with `out = W · in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    /// `mlp_dim × model_dim`
    pub w1: Vec<f64>,
    /// `model_dim × mlp_dim`
    pub w2: Vec<f64>,
}

/// Every parameter of the toy decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// `vocab_size × model_dim`, one row per token.
    pub embedding: Vec<f64>,
    /// Start-of-sequence input vector, processed at position 0.
    pub bos: Vec<f64>,
    pub layers: Vec<LayerWeights>,
    /// `vocab_size × model_dim`, one row of logits weights per token.
    pub lm_head: Vec<f64>,
}

impl Weights {
    /// Draws all weights from a ChaCha8 stream seeded by `config.seed`.
    pub fn seeded(config: &ModelConfig) -> Self {
        let dim = config.model_dim();
        let mlp = config.mlp_dim();
        let vocab = config.vocab_size;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut draw = |n: usize, std: f64| -> Vec<f64> {
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        let mat_std = MATRIX_SCALE / (dim as f64).sqrt();

        let embedding = draw(vocab * dim, EMBEDDING_STD);
        let bos = draw(dim, EMBEDDING_STD);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                wq: draw(dim * dim, mat_std),
                wk: draw(dim * dim, mat_std),
                wv: draw(dim * dim, mat_std),
                wo: draw(dim * dim, mat_std),
                w1: draw(mlp * dim, mat_std),
                w2: draw(dim * mlp, mat_std),
            })
            .collect();
        let lm_head = draw(vocab * dim, LM_HEAD_SCALE / (dim as f64).sqrt());
        Self {
            embedding,
            bos,
            layers,
            lm_head,
        }
    }

    pub(crate) fn check_shape(&self, config: &ModelConfig) -> Result<()> {
        let dim = config.model_dim();
        let mlp = config.mlp_dim();
        let vocab = config.vocab_size;
        let mismatch = |what: &str| Err(Error::InvalidConfig(format!("{what} has wrong shape")));
        if self.embedding.len() != vocab * dim {
            return mismatch("embedding");
        }
        if self.bos.len() != dim {
            return mismatch("bos");
        }
        if self.lm_head.len() != vocab * dim {
            return mismatch("lm_head");
        }
        if self.layers.len() != config.num_layers {
            return mismatch("layer stack");
        }
        for layer in &self.layers {
            let square = [&layer.wq, &layer.wk, &layer.wv, &layer.wo];
            if square.iter().any(|w| w.len() != dim * dim)
                || layer.w1.len() != mlp * dim
                || layer.w2.len() != dim * mlp
            {
                return mismatch("layer");
            }
        }
        if self.all_values().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite weight".into()));
        }
        Ok(())
    }

    fn all_values(&self) -> impl Iterator<Item = f64> + '_ {
        let layer_values = self.layers.iter().flat_map(|l| {
            l.wq.iter()
                .chain(&l.wk)
                .chain(&l.wv)
                .chain(&l.wo)
                .chain(&l.w1)
                .chain(&l.w2)
        });
        self.embedding
            .iter()
            .chain(&self.bos)
            .chain(layer_values)
            .chain(&self.lm_head)
            .copied()
    }

    /// 64-bit FNV-1a over the little-endian byte image of every weight, in
    /// declaration order.
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = FnvHasher::default();
        for v in self.all_values() {
            hasher.write(&v.to_le_bytes());
        }
        hasher.finish()
    }

    pub fn embedding_row(&self, token: usize, dim: usize) -> &[f64] {
        &self.embedding[token * dim..(token + 1) * dim]
    }
}
