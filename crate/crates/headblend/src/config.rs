//! Run configuration: defaults, a plain-text `key = value` file format, and
//! flag-style overrides.

use std::path::Path;

use thiserror::Error;

use crate::augment::HeadShapeParams;
use crate::loss::LossWeights;
use crate::model::ModelConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: cannot read: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("config line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
    #[error("config key `{key}`: bad value `{value}`")]
    BadValue { key: String, value: String },
    #[error("invalid config: {msg}")]
    Invalid { msg: String },
}

/// Numeric precision of the tensor stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub resolution: usize,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Long-hair branch threshold (branch taken when the uniform draw >= eps).
    pub eps: f64,
    /// Patch partition threshold.
    pub tau: f64,
    pub weights: LossWeights,
    pub head_shape: HeadShapeParams,
    pub jitter_enabled: bool,
    pub jitter_range: (f64, f64),
    pub channels: usize,
    pub patch: usize,
    pub fpat_dim: usize,
    pub percep_seed: u64,
    pub checkpoint_every: usize,
    /// When false the adversarial path is removed entirely: no discriminator
    /// evaluation or update, and the adversarial loss reports zero.
    pub adversarial: bool,
    pub precision: Precision,
    /// Optional directory of long-hair silhouette PNGs.
    pub hair_bank: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            resolution: 64,
            seed: 0,
            steps: 2000,
            batch_size: 1,
            lr_g: 1e-4,
            lr_d: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eps: 0.5,
            tau: 0.5,
            weights: LossWeights::default(),
            head_shape: HeadShapeParams::default(),
            jitter_enabled: true,
            jitter_range: (0.8, 1.2),
            channels: 32,
            patch: 4,
            fpat_dim: 64,
            percep_seed: 7777,
            checkpoint_every: 500,
            adversarial: true,
            precision: Precision::F64,
            hair_bank: None,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            resolution: self.resolution,
            channels: self.channels,
            patch: self.patch,
            fpat_dim: self.fpat_dim,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid { msg });
        if self.lr_g <= 0.0 || self.lr_d <= 0.0 {
            return fail(format!("learning rates must be positive: {} / {}", self.lr_g, self.lr_d));
        }
        if self.resolution % (4 * self.patch) != 0 || self.resolution % 8 != 0 {
            return fail(format!(
                "resolution {} must be divisible by 8 and by 4*patch ({})",
                self.resolution,
                4 * self.patch
            ));
        }
        if !(0.0 < self.eps && self.eps < 1.0) {
            return fail(format!("eps {} must lie in (0,1)", self.eps));
        }
        if !(0.0 < self.tau && self.tau < 1.0) {
            return fail(format!("tau {} must lie in (0,1)", self.tau));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return fail("steps and batch_size must be positive".into());
        }
        if self.jitter_range.0 > self.jitter_range.1 || self.jitter_range.0 <= 0.0 {
            return fail(format!("bad jitter range {:?}", self.jitter_range));
        }
        let w = &self.weights;
        if w.rec < 0.0 || w.hc < 0.0 || w.mask < 0.0 || w.per < 0.0 || w.adv < 0.0 {
            return fail("loss weights must be non-negative".into());
        }
        Ok(())
    }

    /// Parse a plain-text config file (`key = value`, `#` comments) over the
    /// defaults, then apply `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
                path: path.display().to_string(),
                source,
            })?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    return Err(ConfigError::Syntax {
                        line: i + 1,
                        text: raw.to_string(),
                    });
                };
                cfg.set(key.trim(), value.trim())?;
            }
        }
        for (key, value) in overrides {
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
            })
        }
        match key {
            "resolution" => self.resolution = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr_g" => self.lr_g = parse(key, value)?,
            "lr_d" => self.lr_d = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "lambda_rec" => self.weights.rec = parse(key, value)?,
            "lambda_hc" => self.weights.hc = parse(key, value)?,
            "lambda_mask" => self.weights.mask = parse(key, value)?,
            "lambda_per" => self.weights.per = parse(key, value)?,
            "lambda_adv" => self.weights.adv = parse(key, value)?,
            "rotation_min_deg" => self.head_shape.rotation_deg.0 = parse(key, value)?,
            "rotation_max_deg" => self.head_shape.rotation_deg.1 = parse(key, value)?,
            "scale_min" => self.head_shape.scale.0 = parse(key, value)?,
            "scale_max" => self.head_shape.scale.1 = parse(key, value)?,
            "squeeze_min" => self.head_shape.squeeze.0 = parse(key, value)?,
            "squeeze_max" => self.head_shape.squeeze.1 = parse(key, value)?,
            "translate_min" => self.head_shape.translate_frac.0 = parse(key, value)?,
            "translate_max" => self.head_shape.translate_frac.1 = parse(key, value)?,
            "dilation_min" => self.head_shape.dilation_radius.0 = parse(key, value)?,
            "dilation_max" => self.head_shape.dilation_radius.1 = parse(key, value)?,
            "jitter" => self.jitter_enabled = parse_bool(key, value)?,
            "jitter_min" => self.jitter_range.0 = parse(key, value)?,
            "jitter_max" => self.jitter_range.1 = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "patch_size" => self.patch = parse(key, value)?,
            "fpat_dim" => self.fpat_dim = parse(key, value)?,
            "percep_seed" => self.percep_seed = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "adversarial" => self.adversarial = parse_bool(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f64" => Precision::F64,
                    "f32" => Precision::F32,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            value: value.to_string(),
                        })
                    }
                }
            }
            "hair_bank" => self.hair_bank = Some(value.to_string()),
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn file_and_overrides() {
        let dir = std::env::temp_dir().join("headblend_cfg_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        std::fs::write(
            &path,
            "# toy run\nresolution = 32\nsteps = 10\nlambda_adv = 0  # disable\n",
        )
        .unwrap();
        let cfg = TrainConfig::load(
            Some(&path),
            &[("seed".to_string(), "9".to_string())],
        )
        .unwrap();
        assert_eq!(cfg.resolution, 32);
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.weights.adv, 0.0);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = TrainConfig::default();
        assert!(matches!(
            cfg.set("no_such_key", "1"),
            Err(ConfigError::UnknownKey { .. })
        ));
    }

    #[test]
    fn invalid_resolution_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.set("resolution", "60").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bad_value_reported_with_key() {
        let mut cfg = TrainConfig::default();
        let err = cfg.set("steps", "many").unwrap_err();
        assert!(err.to_string().contains("steps"));
    }
}
