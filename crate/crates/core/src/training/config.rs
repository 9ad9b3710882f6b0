use std::path::{Path, PathBuf};

use camorect_autograd::nn::AdamWConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SCALES;
use crate::diffusion::{make_schedule, NoiseSchedule, ScheduleKind};
use crate::error::{io_err, Error, Result};
use crate::models::{EncoderKind, ModelConfig, TceMode};
use crate::rectification::RectificationConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Only `"adamw"` is accepted.
    pub kind: String,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let d = AdamWConfig::default();
        OptimizerConfig {
            kind: "adamw".into(),
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
            weight_decay: d.weight_decay,
        }
    }
}

/// Everything a training run depends on. Serialized as TOML for run files
/// and as canonical JSON for hashing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub corpus: PathBuf,
    /// Degradation factor of the follower input (2, 4 or 8). The leader
    /// always reads HQ images.
    pub scale: usize,
    pub sampling_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// `"linear"` or `"cosine"`.
    pub schedule: String,
    pub optimizer: OptimizerConfig,
    pub rectification: RectificationConfig,
    /// Follower encoder; absent means the leader's pyramid architecture.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tce_mode: Option<TceMode>,
    pub seed: u64,
    /// Use only the first `n` training samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    /// Leader gradients are audited every this many follower steps (0: never).
    pub audit_every: usize,
    /// A resumable checkpoint is written every this many epochs (0: never).
    pub checkpoint_every: usize,
    /// Resolution, `T` and layer widths.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            corpus: PathBuf::from("corpus"),
            scale: 4,
            sampling_steps: 10,
            batch_size: 20,
            lr: 1e-4,
            epochs: 30,
            schedule: "linear".into(),
            optimizer: OptimizerConfig::default(),
            rectification: RectificationConfig::default(),
            tce_mode: Some(TceMode::EL),
            seed: 0,
            train_limit: None,
            audit_every: 10,
            checkpoint_every: 1,
            model: ModelConfig::default(),
        }
    }
}

fn bad(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: {msg}"))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| bad("model", e))?;
        if !SCALES.contains(&self.scale) {
            return Err(bad("scale", format!("must be one of {SCALES:?}, got {}", self.scale)));
        }
        if self.sampling_steps == 0 || self.sampling_steps > self.model.t_max {
            return Err(bad(
                "sampling_steps",
                format!("must lie in [1, {}], got {}", self.model.t_max, self.sampling_steps),
            ));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", "must be positive and finite"));
        }
        if self.optimizer.kind != "adamw" {
            return Err(bad("optimizer.kind", format!("only \"adamw\" is supported, got {:?}", self.optimizer.kind)));
        }
        if self.train_limit == Some(0) {
            return Err(bad("train_limit", "must be positive when given"));
        }
        self.schedule_kind()?;
        self.rectification.validate().map_err(|e| bad("rectification", e))?;
        Ok(())
    }

    pub fn schedule_kind(&self) -> Result<ScheduleKind> {
        ScheduleKind::parse(&self.schedule, self.model.t_max).map_err(|e| bad("schedule", e))
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.model.t_max, self.schedule_kind()?)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.optimizer.beta1,
            beta2: self.optimizer.beta2,
            eps: self.optimizer.eps,
            weight_decay: self.optimizer.weight_decay,
        }
    }

    pub fn follower_kind(&self) -> EncoderKind {
        match self.tce_mode {
            Some(mode) => EncoderKind::Tce(mode),
            None => EncoderKind::Pyramid,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(io_err(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rectification::{DistMetric, MetricKind};

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!((cfg.batch_size, cfg.lr, cfg.epochs), (20, 1e-4, 30));
    }

    #[test]
    fn variants_round_trip_and_change_the_hash() {
        let cfg = TrainConfig {
            tce_mode: None,
            train_limit: Some(8),
            lr: 3.3e-3,
            rectification: RectificationConfig {
                metric_cdc: DistMetric::new(MetricKind::Mmd),
                hdc_layers: vec![1],
                ..RectificationConfig::default()
            },
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_ne!(cfg.hash(), TrainConfig::default().hash());
    }

    #[test]
    fn unknown_keys_are_named() {
        let text = TrainConfig::default().to_toml().replace("batch_size", "batch_sise");
        let err = TrainConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("batch_sise"), "{err}");
        let text = TrainConfig::default().to_toml().replace("cdc_enabled", "cdc_enable");
        let err = TrainConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("cdc_enable"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.scale = 3));
        assert!(bad(|c| c.sampling_steps = 101));
        assert!(bad(|c| c.batch_size = 0));
        assert!(bad(|c| c.optimizer.kind = "sgd".into()));
        assert!(bad(|c| c.schedule = "quadratic".into()));
        assert!(bad(|c| c.model.resolution = 48));
    }

    #[test]
    fn shipped_desk_config_is_valid() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
        let cfg = TrainConfig::load(&path).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.model.resolution, 64);
        assert_eq!(cfg.rectification, RectificationConfig::default());
        assert_eq!(cfg.optimizer, OptimizerConfig::default());
    }
}
