use super::{l2_dist, Model, Token};
use crate::enumerate::map_contexts;
use crate::error::Result;

/// Empirical per-layer Lipschitz constants at the divergence position.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzEstimate {
    /// `per_layer[l]` is the largest of `|ΔKV_l| / |Δx_l|` and, below the top
    /// layer, `|Δx_{l+1}| / |Δx_l|`, where `x_l` is layer `l`'s input.
    pub per_layer: Vec<f64>,
    /// `max(1, max_l per_layer[l])`.
    pub kappa: f64,
    /// Largest `|ΔKV| / |ΔE|` over the full KV state of the new position.
    pub full_kv_ratio: f64,
    /// Largest `|ΔKV_l| / |ΔE|` per layer.
    pub kv_over_embedding: Vec<f64>,
    pub pairs: u64,
    pub max_context_len: usize,
}

impl LipschitzEstimate {
    /// Lipschitz constant of the KV map with respect to the input embedding
    /// implied by the per-layer chain: `kappa^L`.
    pub fn kv_lipschitz(&self) -> f64 {
        self.kappa.powi(self.per_layer.len() as i32)
    }
}

#[derive(Default)]
struct Partial {
    per_layer: Vec<f64>,
    kv_over_e: Vec<f64>,
    full: f64,
    pairs: u64,
}

/// Estimates per-layer Lipschitz constants by substituting every pair of
/// distinct tokens after every context of length `0..=max_context_len`.
pub fn lipschitz_estimate(model: &Model, max_context_len: usize) -> Result<LipschitzEstimate> {
    let layers = model.config().num_layers;
    let max_ctx = max_context_len.min(model.config().max_context - 1);
    let vocab = model.vocab_size() as Token;
    let block = 2 * model.config().model_dim();

    let partials = map_contexts(model, max_ctx, |state| {
        let steps: Vec<_> = (0..vocab).map(|t| model.peek_traced(state, t)).collect();
        let mut p = Partial {
            per_layer: vec![0.0; layers],
            kv_over_e: vec![0.0; layers],
            ..Partial::default()
        };
        for a in 0..vocab as usize {
            for b in a + 1..vocab as usize {
                let de = l2_dist(model.embedding(a as Token), model.embedding(b as Token));
                let (sa, sb) = (&steps[a], &steps[b]);
                p.full = p.full.max(l2_dist(&sa.kv, &sb.kv) / de);
                for l in 0..layers {
                    let dx = l2_dist(&sa.stream[l], &sb.stream[l]);
                    let dkv = l2_dist(
                        &sa.kv[l * block..(l + 1) * block],
                        &sb.kv[l * block..(l + 1) * block],
                    );
                    p.kv_over_e[l] = p.kv_over_e[l].max(dkv / de);
                    if dx == 0.0 {
                        continue;
                    }
                    let mut ratio = dkv / dx;
                    if l + 1 < layers {
                        ratio = ratio.max(l2_dist(&sa.stream[l + 1], &sb.stream[l + 1]) / dx);
                    }
                    p.per_layer[l] = p.per_layer[l].max(ratio);
                }
                p.pairs += 1;
            }
        }
        p
    })?;

    let mut per_layer = vec![0.0f64; layers];
    let mut kv_over_embedding = vec![0.0f64; layers];
    let mut full_kv_ratio = 0.0f64;
    let mut pairs = 0;
    for p in partials {
        for l in 0..layers {
            per_layer[l] = per_layer[l].max(p.per_layer[l]);
            kv_over_embedding[l] = kv_over_embedding[l].max(p.kv_over_e[l]);
        }
        full_kv_ratio = full_kv_ratio.max(p.full);
        pairs += p.pairs;
    }
    let kappa = per_layer.iter().copied().fold(1.0, f64::max);
    Ok(LipschitzEstimate {
        per_layer,
        kappa,
        full_kv_ratio,
        kv_over_embedding,
        pairs,
        max_context_len: max_ctx,
    })
}
