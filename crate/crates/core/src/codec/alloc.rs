//! Bit-depth policies: uniform, surprisal-adaptive, and rate-distortion
//! waterfilling.

use crate::error::{Error, Result};

use super::quant::MAX_DEPTH;

/// `max(1, floor(b0 · h / h̄))`, capped at [`MAX_DEPTH`].
pub fn adaptive_depth(surprisal: f64, base: u8, mean_surprisal: f64) -> Result<u8> {
    if !(mean_surprisal > 0.0 && mean_surprisal.is_finite()) {
        return Err(Error::InvalidArgument(
            "mean surprisal must be positive".into(),
        ));
    }
    // h / h̄ first so h = h̄ yields exactly b0
    let raw = (f64::from(base) * (surprisal / mean_surprisal)).floor();
    Ok(raw.clamp(1.0, f64::from(MAX_DEPTH)) as u8)
}

/// Gaussian rate at distortion `D` for a `dim`-component vector whose
/// components each have variance `variance`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaterfillRate {
    /// `(dim / 2) · max(0, log2(σ² / D))`.
    pub total_bits: f64,
    /// `ceil(total_bits / dim)`.
    pub per_component: u32,
}

pub fn waterfill_rate(variance: f64, distortion: f64, dim: usize) -> Result<WaterfillRate> {
    if distortion.is_nan() || distortion <= 0.0 || variance.is_nan() || variance < 0.0 || dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "waterfill needs D > 0, variance ≥ 0, dim > 0 (got {distortion}, {variance}, {dim})"
        )));
    }
    let total_bits = if variance <= distortion {
        0.0
    } else {
        dim as f64 / 2.0 * (variance / distortion).log2()
    };
    Ok(WaterfillRate {
        total_bits,
        per_component: (total_bits / dim as f64).ceil() as u32,
    })
}

/// Waterfill depth for one position, capped at [`MAX_DEPTH`].
pub fn waterfill_depth(variance: f64, distortion: f64, dim: usize) -> Result<u8> {
    let rate = waterfill_rate(variance, distortion, dim)?;
    Ok(rate.per_component.min(u32::from(MAX_DEPTH)) as u8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_examples() {
        let hbar = 1.7;
        assert_eq!(adaptive_depth(hbar, 3, hbar).unwrap(), 3);
        assert_eq!(adaptive_depth(0.0, 3, hbar).unwrap(), 1);
        assert_eq!(adaptive_depth(2.0 * hbar + 1e-9, 3, hbar).unwrap(), 6);
        assert_eq!(adaptive_depth(1e6, 3, hbar).unwrap(), MAX_DEPTH);
        assert!(adaptive_depth(1.0, 3, 0.0).is_err());
    }

    #[test]
    fn waterfill_examples() {
        let d = 0.25;
        assert_eq!(waterfill_rate(d, d, 4).unwrap().total_bits, 0.0);
        let r = waterfill_rate(4.0 * d, d, 4).unwrap();
        assert_eq!((r.total_bits, r.per_component), (4.0, 1));
        assert_eq!(waterfill_rate(0.0, d, 4).unwrap().per_component, 0);
        assert!(waterfill_rate(1.0, 0.0, 4).is_err());
        assert_eq!(waterfill_depth(1e300, 1e-300, 4).unwrap(), MAX_DEPTH);
    }
}
