//! Closed-form per-token storage ratios for a transformer KV cache.

use crate::error::{Error, Result};
use crate::report::Table;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioInputs {
    pub layers: f64,
    pub heads: f64,
    pub head_dim: f64,
    pub bits: f64,
    pub mean_surprisal: f64,
    pub overhead: f64,
}

impl Default for RatioInputs {
    fn default() -> Self {
        Self {
            layers: 80.0,
            heads: 64.0,
            head_dim: 128.0,
            bits: 3.0,
            mean_surprisal: 4.3,
            overhead: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratios {
    /// `2 L H d b` bits per token at `b` bits per component.
    pub bits_per_token: f64,
    /// `2 L H d · 16`.
    pub fp16_bits_per_token: f64,
    /// `B_fp16 / h̄`.
    pub vs_fp16: f64,
    /// `B_b / (h̄ · overhead)`.
    pub vs_quantized: f64,
}

pub fn theoretical_ratio(inputs: &RatioInputs) -> Result<Ratios> {
    let RatioInputs {
        layers,
        heads,
        head_dim,
        bits,
        mean_surprisal,
        overhead,
    } = *inputs;
    let all = [layers, heads, head_dim, bits, mean_surprisal, overhead];
    if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidArgument(
            "ratio inputs must be positive".into(),
        ));
    }
    let per_component = 2.0 * layers * heads * head_dim;
    let bits_per_token = per_component * bits;
    let fp16_bits_per_token = per_component * 16.0;
    Ok(Ratios {
        bits_per_token,
        fp16_bits_per_token,
        vs_fp16: fp16_bits_per_token / mean_surprisal,
        vs_quantized: bits_per_token / (mean_surprisal * overhead),
    })
}

/// Formats `x` with `sig` significant digits in scientific notation.
pub fn sig_figs(x: f64, sig: usize) -> String {
    format!("{:.*e}", sig.saturating_sub(1), x)
}

impl Ratios {
    pub fn table(&self, inputs: &RatioInputs) -> Table {
        let mut t = Table::new(["quantity", "value", "value_3sf"]);
        let rows = [
            ("layers", inputs.layers),
            ("heads", inputs.heads),
            ("head_dim", inputs.head_dim),
            ("bits", inputs.bits),
            ("mean_surprisal", inputs.mean_surprisal),
            ("overhead", inputs.overhead),
            ("bits_per_token", self.bits_per_token),
            ("fp16_bits_per_token", self.fp16_bits_per_token),
            ("ratio_vs_fp16", self.vs_fp16),
            ("ratio_vs_quantized", self.vs_quantized),
        ];
        for (name, v) in rows {
            t.push([name.to_string(), format!("{v:.3}"), sig_figs(v, 3)]);
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nonpositive() {
        let bad = RatioInputs {
            mean_surprisal: 0.0,
            ..RatioInputs::default()
        };
        assert!(theoretical_ratio(&bad).is_err());
    }

    #[test]
    fn sig_fig_format() {
        assert_eq!(sig_figs(914_455.8, 3), "9.14e5");
        assert_eq!(sig_figs(3_932_160.0, 3), "3.93e6");
    }
}
