use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::index::SessionId;
use crate::model::ModelConfig;
use crate::predictor::PredictionMethod;

use super::container::parse_config_text;
use super::quant::MAX_DEPTH;

/// How many bits each residual component gets at a position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DepthPolicy {
    Uniform {
        bits: u8,
    },
    /// `max(1, floor(b0 · h_i / h̄))`; `h̄` is calibrated on the corpus when unset.
    Adaptive {
        base: u8,
        mean_surprisal: Option<f64>,
    },
    /// Smallest whole-bit depth meeting per-component distortion `D`.
    Waterfill {
        distortion: f64,
    },
}

/// What the tail residual is taken against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DeltaMode {
    /// The member's own predicted KV.
    #[default]
    Predictive,
    /// The centroid's KV at the same position (zero past its end).
    CentroidSubtraction,
}

impl std::str::FromStr for DeltaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predictive" => Ok(Self::Predictive),
            "centroid" => Ok(Self::CentroidSubtraction),
            other => Err(Error::InvalidArgument(format!(
                "unknown delta mode {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for DeltaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Predictive => "predictive",
            Self::CentroidSubtraction => "centroid",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecConfig {
    pub depth: DepthPolicy,
    pub predictor: PredictionMethod,
    pub delta: DeltaMode,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            depth: DepthPolicy::Uniform { bits: 8 },
            predictor: PredictionMethod::Exact,
            delta: DeltaMode::Predictive,
        }
    }
}

impl CodecConfig {
    pub fn uniform(bits: u8) -> Self {
        Self {
            depth: DepthPolicy::Uniform { bits },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        match self.depth {
            DepthPolicy::Uniform { bits } if !(1..=MAX_DEPTH).contains(&bits) => {
                bad(format!("uniform depth {bits} outside 1..={MAX_DEPTH}"))
            }
            DepthPolicy::Adaptive { base, .. } if !(1..=MAX_DEPTH).contains(&base) => bad(format!(
                "adaptive base depth {base} outside 1..={MAX_DEPTH}"
            )),
            DepthPolicy::Adaptive {
                mean_surprisal: Some(h),
                ..
            } if !(h > 0.0 && h.is_finite()) => bad(format!("mean surprisal {h} must be positive")),
            DepthPolicy::Waterfill { distortion }
                if !(distortion > 0.0 && distortion.is_finite()) =>
            {
                bad(format!("distortion {distortion} must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// The `key=value` block echoed into every container.
    pub fn echo(&self, model: &ModelConfig, centroid: Option<SessionId>) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "vocab_size={}", model.vocab_size);
        let _ = writeln!(s, "layers={}", model.num_layers);
        let _ = writeln!(s, "heads={}", model.num_heads);
        let _ = writeln!(s, "head_dim={}", model.head_dim);
        let _ = writeln!(s, "seed={}", model.seed);
        let _ = writeln!(s, "kv_dim={}", model.kv_stride());
        match self.depth {
            DepthPolicy::Uniform { bits } => {
                let _ = writeln!(s, "depth_mode=uniform\nbits={bits}");
            }
            DepthPolicy::Adaptive {
                base,
                mean_surprisal,
            } => {
                let _ = writeln!(s, "depth_mode=adaptive\nbase_bits={base}");
                if let Some(h) = mean_surprisal {
                    let _ = writeln!(s, "mean_surprisal={h}");
                }
            }
            DepthPolicy::Waterfill { distortion } => {
                let _ = writeln!(s, "depth_mode=waterfill\ndistortion={distortion}");
            }
        }
        let _ = writeln!(s, "predictor={}", self.predictor);
        let _ = writeln!(s, "delta={}", self.delta);
        match centroid {
            Some(c) => {
                let _ = writeln!(s, "centroid_session={c}");
            }
            None => {
                let _ = writeln!(s, "centroid_session=none");
            }
        }
        s
    }
}

/// What a decoder needs from a container's config block.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeParams {
    pub model: ModelConfig,
    pub kv_dim: usize,
    pub depth: DepthPolicy,
    pub predictor: PredictionMethod,
    pub delta: DeltaMode,
    pub centroid: Option<SessionId>,
}

impl DecodeParams {
    pub fn parse(text: &str) -> Result<Self> {
        let map = parse_config_text(text)?;
        let get = |k: &str| {
            map.get(k)
                .ok_or_else(|| Error::Corrupted(format!("config block lacks {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Corrupted(format!("config key {k} is not a count")))
        };
        let corrupt = |e: Error| Error::Corrupted(e.to_string());
        let centroid = match get("centroid_session")?.as_str() {
            "none" => None,
            v => Some(
                v.parse()
                    .map_err(|_| Error::Corrupted("bad centroid_session".into()))?,
            ),
        };
        let float = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Corrupted(format!("config key {k} is not a number")))
        };
        let depth_bits = |k: &str| -> Result<u8> {
            get(k)?
                .parse()
                .map_err(|_| Error::Corrupted(format!("config key {k} is not a depth")))
        };
        let depth = match get("depth_mode")?.as_str() {
            "uniform" => DepthPolicy::Uniform {
                bits: depth_bits("bits")?,
            },
            "adaptive" => DepthPolicy::Adaptive {
                base: depth_bits("base_bits")?,
                mean_surprisal: match map.get("mean_surprisal") {
                    Some(_) => Some(float("mean_surprisal")?),
                    None => None,
                },
            },
            "waterfill" => DepthPolicy::Waterfill {
                distortion: float("distortion")?,
            },
            other => return Err(Error::Corrupted(format!("unknown depth_mode {other:?}"))),
        };
        Ok(Self {
            model: ModelConfig {
                vocab_size: num("vocab_size")?,
                num_layers: num("layers")?,
                num_heads: num("heads")?,
                head_dim: num("head_dim")?,
                seed: get("seed")?
                    .parse()
                    .map_err(|_| Error::Corrupted("bad seed".into()))?,
                max_context: 1,
            },
            kv_dim: num("kv_dim")?,
            depth,
            predictor: get("predictor")?.parse().map_err(corrupt)?,
            delta: get("delta")?.parse().map_err(corrupt)?,
            centroid,
        })
    }

    pub fn codec(&self) -> CodecConfig {
        CodecConfig {
            depth: self.depth,
            predictor: self.predictor,
            delta: self.delta,
        }
    }

    /// Fails unless `model` has the shape this block was written for.
    pub fn check_shape(&self, model: &ModelConfig) -> Result<()> {
        let same = self.model.vocab_size == model.vocab_size
            && self.model.num_layers == model.num_layers
            && self.model.num_heads == model.num_heads
            && self.model.head_dim == model.head_dim
            && self.kv_dim == model.kv_stride();
        if same {
            Ok(())
        } else {
            Err(Error::Corrupted(
                "container was written for a different model shape".into(),
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_parses_back() {
        let cfg = CodecConfig {
            depth: DepthPolicy::Adaptive {
                base: 3,
                mean_surprisal: Some(0.123_456_789_012_345_6),
            },
            predictor: PredictionMethod::TopK(4),
            delta: DeltaMode::CentroidSubtraction,
        };
        let text = cfg.echo(&ModelConfig::default(), Some(17));
        assert!(text.contains("mean_surprisal=0.1234567890123456\n"));
        let p = DecodeParams::parse(&text).unwrap();
        assert_eq!(p.codec(), cfg);
        assert_eq!(p.predictor, PredictionMethod::TopK(4));
        assert_eq!(p.delta, DeltaMode::CentroidSubtraction);
        assert_eq!(p.centroid, Some(17));
        assert_eq!(p.kv_dim, 32);
        p.check_shape(&ModelConfig::default()).unwrap();
        let none = DecodeParams::parse(&cfg.echo(&ModelConfig::default(), None)).unwrap();
        assert_eq!(none.centroid, None);
        for depth in [
            DepthPolicy::Uniform { bits: 5 },
            DepthPolicy::Waterfill { distortion: 0.0123 },
            DepthPolicy::Adaptive {
                base: 2,
                mean_surprisal: None,
            },
        ] {
            let c = CodecConfig { depth, ..cfg };
            let text = c.echo(&ModelConfig::default(), None);
            assert_eq!(DecodeParams::parse(&text).unwrap().codec(), c);
        }
    }

    #[test]
    fn validation() {
        assert!(CodecConfig::uniform(0).validate().is_err());
        assert!(CodecConfig::uniform(17).validate().is_err());
        CodecConfig::uniform(16).validate().unwrap();
        let wf = CodecConfig {
            depth: DepthPolicy::Waterfill { distortion: 0.0 },
            ..CodecConfig::default()
        };
        assert!(wf.validate().is_err());
        let ad = CodecConfig {
            depth: DepthPolicy::Adaptive {
                base: 3,
                mean_surprisal: Some(-1.0),
            },
            ..CodecConfig::default()
        };
        assert!(ad.validate().is_err());
    }
}
