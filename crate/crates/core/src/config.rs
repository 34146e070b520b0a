//! The run configuration: one optional `key=value` file plus overrides.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is known in
//! advance; unknown or repeated keys are errors. Overrides are applied after
//! the file, in order, and may repeat keys.

use std::fmt::Write as _;

use crate::analyzer::workload::WorkloadSpec;
use crate::codec::{CodecConfig, DeltaMode, DepthPolicy};
use crate::error::{Error, Result};
use crate::index::{ClusterCriterion, DEFAULT_EPSILON};
use crate::model::ModelConfig;
use crate::pipeline::ClusterSettings;
use crate::predictor::PredictionMethod;

/// Clustering threshold used when neither the config nor the workload file
/// provides one.
pub const FALLBACK_THRESHOLD_BITS: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthMode {
    Uniform,
    Adaptive,
    Waterfill,
}

impl std::str::FromStr for DepthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "adaptive" => Ok(Self::Adaptive),
            "waterfill" => Ok(Self::Waterfill),
            other => Err(Error::InvalidArgument(format!(
                "unknown depth_mode {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for DepthMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Adaptive => "adaptive",
            Self::Waterfill => "waterfill",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub workload: WorkloadSpec,
    pub depth_mode: DepthMode,
    pub bits: u8,
    pub base_bits: u8,
    /// `None` calibrates on the corpus being compressed.
    pub mean_surprisal: Option<f64>,
    pub distortion: f64,
    pub predictor: PredictionMethod,
    pub delta: DeltaMode,
    /// `None` takes the workload file's hint, then [`FALLBACK_THRESHOLD_BITS`].
    pub threshold: Option<f64>,
    pub criterion: ClusterCriterion,
    pub epsilon: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            workload: WorkloadSpec::default(),
            depth_mode: DepthMode::Uniform,
            bits: 8,
            base_bits: 3,
            mean_surprisal: None,
            distortion: 0.05,
            predictor: PredictionMethod::Exact,
            delta: DeltaMode::Predictive,
            threshold: None,
            criterion: ClusterCriterion::SharedInformation,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Every key, in echo order.
pub const KEYS: &[&str] = &[
    "vocab_size",
    "layers",
    "heads",
    "head_dim",
    "seed",
    "max_context",
    "sessions",
    "length",
    "cluster_fraction",
    "tail_ratio",
    "temperature",
    "workload_seed",
    "depth_mode",
    "bits",
    "base_bits",
    "mean_surprisal",
    "distortion",
    "predictor",
    "delta",
    "threshold",
    "criterion",
    "epsilon",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value {value:?} for {key}")))
}

fn parse_auto(key: &str, value: &str) -> Result<Option<f64>> {
    match value {
        "auto" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn auto(v: Option<f64>) -> String {
    v.map_or_else(|| "auto".into(), |x| x.to_string())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "vocab_size" => self.model.vocab_size = parse(key, v)?,
            "layers" => self.model.num_layers = parse(key, v)?,
            "heads" => self.model.num_heads = parse(key, v)?,
            "head_dim" => self.model.head_dim = parse(key, v)?,
            "seed" => self.model.seed = parse(key, v)?,
            "max_context" => self.model.max_context = parse(key, v)?,
            "sessions" => self.workload.sessions = parse(key, v)?,
            "length" => self.workload.length = parse(key, v)?,
            "cluster_fraction" => self.workload.cluster_fraction = parse(key, v)?,
            "tail_ratio" => self.workload.tail_ratio = parse(key, v)?,
            "temperature" => self.workload.temperature = parse(key, v)?,
            "workload_seed" => self.workload.seed = parse(key, v)?,
            "depth_mode" => self.depth_mode = v.parse()?,
            "bits" => self.bits = parse(key, v)?,
            "base_bits" => self.base_bits = parse(key, v)?,
            "mean_surprisal" => self.mean_surprisal = parse_auto(key, v)?,
            "distortion" => self.distortion = parse(key, v)?,
            "predictor" => self.predictor = v.parse()?,
            "delta" => self.delta = v.parse()?,
            "threshold" => self.threshold = parse_auto(key, v)?,
            "criterion" => self.criterion = v.parse()?,
            "epsilon" => self.epsilon = parse(key, v)?,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown config key {other:?}"
                )))
            }
        }
        Ok(())
    }

    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::ConfigParse {
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(err(format!("key {k} repeated")));
            }
            cfg.set(k, v).map_err(|e| err(e.to_string()))?;
        }
        Ok(cfg)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<'a>(
        &mut self,
        overrides: impl IntoIterator<Item = &'a str>,
    ) -> Result<()> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("override {o:?} is not key=value"))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.codec().validate()?;
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(
                "epsilon must be non-negative".into(),
            ));
        }
        if let Some(t) = self.threshold {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::InvalidArgument(
                    "threshold must be non-negative".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn codec(&self) -> CodecConfig {
        let depth = match self.depth_mode {
            DepthMode::Uniform => DepthPolicy::Uniform { bits: self.bits },
            DepthMode::Adaptive => DepthPolicy::Adaptive {
                base: self.base_bits,
                mean_surprisal: self.mean_surprisal,
            },
            DepthMode::Waterfill => DepthPolicy::Waterfill {
                distortion: self.distortion,
            },
        };
        CodecConfig {
            depth,
            predictor: self.predictor,
            delta: self.delta,
        }
    }

    pub fn cluster(&self, hint: Option<f64>) -> ClusterSettings {
        ClusterSettings {
            threshold: self
                .threshold
                .or(hint.map(|h| h.max(0.0)))
                .unwrap_or(FALLBACK_THRESHOLD_BITS),
            criterion: self.criterion,
            epsilon: self.epsilon,
        }
    }

    /// Every key as `key=value`, one per line, in [`KEYS`] order.
    pub fn echo(&self) -> String {
        let w = &self.workload;
        let values: [String; 22] = [
            self.model.vocab_size.to_string(),
            self.model.num_layers.to_string(),
            self.model.num_heads.to_string(),
            self.model.head_dim.to_string(),
            self.model.seed.to_string(),
            self.model.max_context.to_string(),
            w.sessions.to_string(),
            w.length.to_string(),
            w.cluster_fraction.to_string(),
            w.tail_ratio.to_string(),
            w.temperature.to_string(),
            w.seed.to_string(),
            self.depth_mode.to_string(),
            self.bits.to_string(),
            self.base_bits.to_string(),
            auto(self.mean_surprisal),
            self.distortion.to_string(),
            self.predictor.to_string(),
            self.delta.to_string(),
            auto(self.threshold),
            self.criterion.to_string(),
            self.epsilon.to_string(),
        ];
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_parses_back() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides([
            "depth_mode=adaptive",
            "mean_surprisal=1.25",
            "threshold=3.5",
            "predictor=topk2",
        ])
        .unwrap();
        let back = RunConfig::parse(&cfg.echo()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(
            RunConfig::parse(&RunConfig::default().echo()).unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn rejects_unknown_and_repeated_keys() {
        assert!(matches!(
            RunConfig::parse("# c\n\nbogus=1\n"),
            Err(Error::ConfigParse { line: 3, .. })
        ));
        assert!(matches!(
            RunConfig::parse("bits=3\nbits=4\n"),
            Err(Error::ConfigParse { line: 2, .. })
        ));
        assert!(RunConfig::parse("bits\n").is_err());
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_overrides(["nope=1"]).is_err());
        cfg.apply_overrides(["bits=4", "bits=5"]).unwrap();
        assert_eq!(cfg.bits, 5);
    }

    #[test]
    fn threshold_resolution() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.cluster(None).threshold, FALLBACK_THRESHOLD_BITS);
        assert_eq!(cfg.cluster(Some(12.5)).threshold, 12.5);
        let fixed = RunConfig {
            threshold: Some(2.0),
            ..RunConfig::default()
        };
        assert_eq!(fixed.cluster(Some(12.5)).threshold, 2.0);
    }
}
