//! Per-vector midrise quantizer with offset-binary codes.
//!
//! A record at depth `b ≥ 1` splits `[-s, s]` into `2^b` cells of width
//! `Δ = 2s / 2^b` and reconstructs each component at its cell midpoint, so
//! unclamped components are recovered within `s / 2^b`. Depth 0 stores only
//! the scale and decodes to the zero vector.

use crate::error::{Error, Result};

pub const MAX_DEPTH: u8 = 16;

/// Bits of the fixed record header: depth `u8` and scale `f32`.
pub const RECORD_HEADER_BITS: u64 = 8 + 32;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantRecord {
    pub depth: u8,
    pub scale: f32,
    /// One code per component when `depth > 0`, empty otherwise.
    pub codes: Vec<u16>,
}

impl QuantRecord {
    /// Serialized size of this record in bits.
    pub fn bits(&self, dim: usize) -> u64 {
        record_bits(dim, self.depth)
    }

    /// Guaranteed per-component error bound of an unclamped record.
    pub fn error_bound(&self) -> f64 {
        f64::from(self.scale) / f64::powi(2.0, i32::from(self.depth))
    }
}

/// Bytes of packed codes for `dim` components at `depth` bits each.
pub fn packed_len(dim: usize, depth: u8) -> usize {
    (dim * depth as usize).div_ceil(8)
}

pub fn record_bits(dim: usize, depth: u8) -> u64 {
    RECORD_HEADER_BITS + 8 * packed_len(dim, depth) as u64
}

/// Smallest `f32` at least as large as the largest absolute component.
pub fn max_abs_scale(values: &[f64]) -> Result<f32> {
    let mut m = 0.0f64;
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        m = m.max(v.abs());
    }
    let mut s = m as f32;
    if f64::from(s) < m {
        s = s.next_up();
    }
    Ok(s)
}

/// Quantizes `values` at `depth` bits over `[-scale, scale]`. Returns the
/// record and how many components fell outside the range.
pub fn encode(values: &[f64], depth: u8, scale: f32) -> Result<(QuantRecord, usize)> {
    if depth > MAX_DEPTH {
        return Err(Error::InvalidArgument(format!(
            "depth {depth} exceeds {MAX_DEPTH}"
        )));
    }
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(Error::InvalidArgument(format!("invalid scale {scale}")));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    let s = f64::from(scale);
    let clamped = values.iter().filter(|v| v.abs() > s).count();
    if depth == 0 {
        return Ok((
            QuantRecord {
                depth,
                scale,
                codes: Vec::new(),
            },
            clamped,
        ));
    }
    let levels = 1u32 << depth;
    let top = (levels - 1) as i64;
    let step = 2.0 * s / f64::from(levels);
    let codes = values
        .iter()
        .map(|&x| {
            if step == 0.0 {
                return 0;
            }
            let guess = (((x + s) / step).floor() as i64).clamp(0, top);
            // floating-point division can land one cell off; keep the nearest
            let mut best = guess;
            for c in [guess - 1, guess + 1] {
                if (0..=top).contains(&c)
                    && (level(c, s, step) - x).abs() < (level(best, s, step) - x).abs()
                {
                    best = c;
                }
            }
            best as u16
        })
        .collect();
    Ok((
        QuantRecord {
            depth,
            scale,
            codes,
        },
        clamped,
    ))
}

fn level(code: i64, s: f64, step: f64) -> f64 {
    -s + (code as f64 + 0.5) * step
}

/// Reconstructs `dim` components from a record.
pub fn decode(record: &QuantRecord, dim: usize) -> Result<Vec<f64>> {
    if record.depth == 0 {
        return Ok(vec![0.0; dim]);
    }
    if record.codes.len() != dim {
        return Err(Error::MalformedRecord(format!(
            "{} codes for {dim} components",
            record.codes.len()
        )));
    }
    if record.depth > MAX_DEPTH || !record.scale.is_finite() {
        return Err(Error::MalformedRecord(format!(
            "depth {} scale {}",
            record.depth, record.scale
        )));
    }
    let s = f64::from(record.scale);
    let step = 2.0 * s / f64::from(1u32 << record.depth);
    Ok(record
        .codes
        .iter()
        .map(|&c| level(i64::from(c), s, step))
        .collect())
}

/// Packs `codes` of `depth` bits each, least significant bit first.
pub fn pack(codes: &[u16], depth: u8) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(codes.len(), depth)];
    let mut bit = 0usize;
    for &c in codes {
        for j in 0..depth as usize {
            if (c >> j) & 1 == 1 {
                out[bit / 8] |= 1 << (bit % 8);
            }
            bit += 1;
        }
    }
    out
}

pub fn unpack(bytes: &[u8], dim: usize, depth: u8) -> Result<Vec<u16>> {
    if bytes.len() != packed_len(dim, depth) {
        return Err(Error::MalformedRecord(format!(
            "{} packed bytes for {dim} components at depth {depth}",
            bytes.len()
        )));
    }
    let mut bit = 0usize;
    Ok((0..dim)
        .map(|_| {
            let mut c = 0u16;
            for j in 0..depth as usize {
                if (bytes[bit / 8] >> (bit % 8)) & 1 == 1 {
                    c |= 1 << j;
                }
                bit += 1;
            }
            c
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_zero_is_metadata_only() {
        let (rec, clamped) = encode(&[0.5, -0.25], 0, 0.5).unwrap();
        assert_eq!(clamped, 0);
        assert!(rec.codes.is_empty());
        assert_eq!(rec.bits(2), 40);
        assert_eq!(decode(&rec, 2).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn one_bit_levels() {
        let (rec, _) = encode(&[-1.0, -0.1, 0.1, 1.0], 1, 1.0).unwrap();
        assert_eq!(rec.codes, vec![0, 0, 1, 1]);
        assert_eq!(decode(&rec, 4).unwrap(), vec![-0.5, -0.5, 0.5, 0.5]);
    }

    #[test]
    fn scale_rounds_up() {
        let v = [0.1f64, -0.3];
        let s = max_abs_scale(&v).unwrap();
        assert!(f64::from(s) >= 0.3);
        assert_eq!(max_abs_scale(&[]).unwrap(), 0.0);
        assert!(matches!(
            max_abs_scale(&[f64::NAN]),
            Err(Error::NonFinite { index: 0 })
        ));
    }

    #[test]
    fn clamping_is_counted() {
        let (_, clamped) = encode(&[2.0, 0.0, -3.0], 4, 1.0).unwrap();
        assert_eq!(clamped, 2);
    }

    #[test]
    fn zero_scale_decodes_to_zero() {
        let (rec, _) = encode(&[0.0, 0.0], 3, 0.0).unwrap();
        assert_eq!(decode(&rec, 2).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn pack_roundtrip_and_length() {
        let codes = [5u16, 0, 7, 1, 3];
        let bytes = pack(&codes, 3);
        assert_eq!(bytes.len(), 2);
        assert_eq!(unpack(&bytes, 5, 3).unwrap(), codes);
        assert!(unpack(&bytes[..1], 5, 3).is_err());
        let wide = [65535u16, 1, 32768];
        assert_eq!(unpack(&pack(&wide, 16), 3, 16).unwrap(), wide);
    }

    #[test]
    fn malformed_records_rejected() {
        let rec = QuantRecord {
            depth: 2,
            scale: 1.0,
            codes: vec![1, 2],
        };
        assert!(decode(&rec, 3).is_err());
        assert!(encode(&[1.0], 17, 1.0).is_err());
        assert!(matches!(
            encode(&[f64::INFINITY], 2, 1.0),
            Err(Error::NonFinite { index: 0 })
        ));
    }
}
