//! Leader and follower conditional encoders and the shared-topology
//! denoising network.
//!
//! Encoders emit a [`ConditionalDistribution`]: four feature maps at `R/4`,
//! `R/8`, `R/16` and `R/32` (index 0 is the finest). The denoiser injects
//! each level at the matching scale of its encoder path and exposes its three
//! decoder stages as a [`HybridDistribution`].

mod denoiser;
mod pyramid;
mod tce;

use camorect_autograd::nn::{ParamStore, Tracking, Vars};
use camorect_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub use denoiser::{denoise, DenoiseOutput, Denoiser};
pub use pyramid::{leader_encode, PyramidEncoder};
pub use tce::{follower_encode, fuse_layers, tap_layers, TceEncoder, TokenTrace};

/// Number of pyramid levels every encoder produces.
pub const LEVELS: usize = 4;
/// Number of decoder stages exposed as hybrid features.
pub const HYBRID_LAYERS: usize = 3;
/// Downsampling factor of the finest pyramid level.
pub const STEM_STRIDE: usize = 4;
/// Downsampling factor of the coarsest pyramid level.
pub const PYRAMID_STRIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Leader,
    Follower,
}

/// Multi-scale conditional features, finest level first.
#[derive(Clone, Debug)]
pub struct ConditionalDistribution {
    pub levels: Vec<Tensor>,
    pub source: Source,
    pub time_conditioned: bool,
}

impl ConditionalDistribution {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.levels.iter().map(|l| l.shape().to_vec()).collect()
    }

    /// Same features cut out of the autodiff graph.
    pub fn detach(&self) -> Self {
        ConditionalDistribution {
            levels: self.levels.iter().map(Tensor::detach).collect(),
            source: self.source,
            time_conditioned: self.time_conditioned,
        }
    }
}

/// The three decoder-stage feature stacks, lowest resolution first.
#[derive(Clone, Debug)]
pub struct HybridDistribution {
    pub layers: Vec<Tensor>,
    pub t: Vec<usize>,
}

impl HybridDistribution {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|l| l.shape().to_vec()).collect()
    }

    pub fn detach(&self) -> Self {
        HybridDistribution {
            layers: self.layers.iter().map(Tensor::detach).collect(),
            t: self.t.clone(),
        }
    }
}

/// Where the follower receives time tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TceMode {
    /// First layer only.
    FL,
    /// The four tap layers.
    OL,
    /// One token shared by each consecutive pair of layers.
    GL,
    /// A distinct token at every layer.
    EL,
}

impl TceMode {
    pub const ALL: [TceMode; 4] = [TceMode::FL, TceMode::OL, TceMode::GL, TceMode::EL];

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_uppercase().as_str() {
            "FL" => Ok(TceMode::FL),
            "OL" => Ok(TceMode::OL),
            "GL" => Ok(TceMode::GL),
            "EL" => Ok(TceMode::EL),
            _ => Err(invalid(format!("unknown tce mode `{name}` (expected FL, OL, GL or EL)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TceMode::FL => "FL",
            TceMode::OL => "OL",
            TceMode::GL => "GL",
            TceMode::EL => "EL",
        }
    }
}

/// Sizes shared by the encoders and the denoiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input height and width; must be divisible by 32.
    pub resolution: usize,
    /// Channels of every conditional level.
    pub cond_channels: usize,
    pub denoiser_channels: usize,
    pub token_dim: usize,
    /// Number of follower transformer layers.
    pub tce_layers: usize,
    pub mlp_ratio: usize,
    /// Width of the sinusoidal timestep features.
    pub time_dim: usize,
    /// Number of diffusion steps `T`.
    pub t_max: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            resolution: 64,
            cond_channels: 8,
            denoiser_channels: 12,
            token_dim: 16,
            tce_layers: 8,
            mlp_ratio: 2,
            time_dim: 16,
            t_max: 100,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.resolution % PYRAMID_STRIDE != 0 {
            return Err(invalid(format!(
                "resolution {} is not divisible by the pyramid stride {PYRAMID_STRIDE}",
                self.resolution
            )));
        }
        if self.cond_channels == 0 || self.denoiser_channels == 0 || self.token_dim == 0 || self.mlp_ratio == 0 {
            return Err(invalid("model widths must be positive"));
        }
        if self.tce_layers < 4 || self.tce_layers % 4 != 0 {
            return Err(invalid(format!("tce_layers must be a positive multiple of 4, got {}", self.tce_layers)));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(invalid("time_dim must be even and at least 2"));
        }
        if self.t_max == 0 {
            return Err(invalid("t_max must be positive"));
        }
        Ok(())
    }

    /// `[channels, side, side]` of every pyramid level, finest first.
    pub fn level_shapes(&self) -> Vec<[usize; 3]> {
        (0..LEVELS)
            .map(|i| {
                let side = self.resolution / (STEM_STRIDE << i);
                [self.cond_channels, side, side]
            })
            .collect()
    }

    pub(crate) fn check_input(&self, x: &Tensor, channels: usize, what: &str) -> Result<usize> {
        let r = self.resolution;
        if x.rank() != 4 || x.dim(1) != channels || x.dim(2) != r || x.dim(3) != r {
            return Err(invalid(format!(
                "{what} must be [batch, {channels}, {r}, {r}], got {:?}",
                x.shape()
            )));
        }
        if r % PYRAMID_STRIDE != 0 {
            return Err(invalid(format!("resolution {r} is not divisible by {PYRAMID_STRIDE}")));
        }
        Ok(x.dim(0))
    }

    pub(crate) fn check_timesteps(&self, t: &[usize], batch: usize) -> Result<()> {
        if t.len() != batch {
            return Err(invalid(format!("{} timesteps for a batch of {batch}", t.len())));
        }
        if let Some(bad) = t.iter().find(|&&s| s < 1 || s > self.t_max) {
            return Err(invalid(format!("timestep {bad} outside [1, {}]", self.t_max)));
        }
        Ok(())
    }
}

/// Which encoder architecture conditions a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "mode")]
pub enum EncoderKind {
    Pyramid,
    Tce(TceMode),
}

/// Sinusoidal features of integer timesteps, `[batch, dim]`.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &s in t {
        let s = s as f64;
        let freqs = (0..half).map(|k| (-(10_000f64.ln()) * k as f64 / half as f64).exp());
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|w| ((s * w).sin(), (s * w).cos())).unzip();
        data.extend(sin);
        data.extend(cos);
    }
    Tensor::from_vec(data, &[t.len(), dim]).expect("length matches")
}

/// A conditional encoder plus denoiser with separate parameter stores.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalModel {
    pub config: ModelConfig,
    pub encoder_kind: EncoderKind,
    pub encoder: ParamStore,
    pub denoiser: ParamStore,
}

/// Both parameter stores bound for one forward pass.
#[derive(Clone)]
pub struct BoundModel<'a> {
    pub model: &'a ConditionalModel,
    pub encoder: Vars,
    pub denoiser: Vars,
}

impl ConditionalModel {
    pub fn new(config: ModelConfig, encoder_kind: EncoderKind, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut encoder = ParamStore::new(seed);
        match encoder_kind {
            EncoderKind::Pyramid => PyramidEncoder::new(&config).register(&mut encoder)?,
            EncoderKind::Tce(mode) => TceEncoder::new(&config, mode).register(&mut encoder)?,
        }
        let mut denoiser = ParamStore::new(seed ^ 0x5eed_d0e5);
        Denoiser::new(&config).register(&mut denoiser)?;
        Ok(ConditionalModel {
            config,
            encoder_kind,
            encoder,
            denoiser,
        })
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.encoder.set_frozen(frozen);
        self.denoiser.set_frozen(frozen);
    }

    pub fn is_frozen(&self) -> bool {
        self.encoder.is_frozen() && self.denoiser.is_frozen()
    }

    pub fn num_parameters(&self) -> usize {
        self.encoder.num_scalars() + self.denoiser.num_scalars()
    }

    pub fn bind(&self, tracking: Tracking) -> BoundModel<'_> {
        BoundModel {
            model: self,
            encoder: self.encoder.bind(tracking),
            denoiser: self.denoiser.bind(tracking),
        }
    }
}

impl BoundModel<'_> {
    /// Encodes an image batch; `t` is ignored by time-agnostic encoders.
    pub fn encode(&self, x: &Tensor, t: &[usize]) -> Result<ConditionalDistribution> {
        let cfg = &self.model.config;
        match self.model.encoder_kind {
            EncoderKind::Pyramid => PyramidEncoder::new(cfg).forward(&self.encoder, x),
            EncoderKind::Tce(mode) => Ok(TceEncoder::new(cfg, mode).forward(&self.encoder, x, t)?.0),
        }
    }

    pub fn denoise(&self, m_t: &Tensor, t: &[usize], c: &ConditionalDistribution) -> Result<DenoiseOutput> {
        Denoiser::new(&self.model.config).forward(&self.denoiser, m_t, t, c)
    }

    /// Encoder then denoiser; the conditional features are returned too.
    pub fn forward(&self, x: &Tensor, m_t: &Tensor, t: &[usize]) -> Result<(ConditionalDistribution, DenoiseOutput)> {
        let c = self.encode(x, t)?;
        let out = self.denoise(m_t, t, &c)?;
        Ok((c, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_shapes_follow_the_stride_pyramid() {
        let cfg = ModelConfig {
            resolution: 64,
            cond_channels: 5,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.level_shapes(), vec![[5, 16, 16], [5, 8, 8], [5, 4, 4], [5, 2, 2]]);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        for bad in [
            ModelConfig { resolution: 48, ..ModelConfig::default() },
            ModelConfig { tce_layers: 6, ..ModelConfig::default() },
            ModelConfig { time_dim: 3, ..ModelConfig::default() },
            ModelConfig { cond_channels: 0, ..ModelConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn tce_mode_parsing() {
        for m in TceMode::ALL {
            assert_eq!(TceMode::parse(m.as_str()).unwrap(), m);
        }
        assert_eq!(TceMode::parse("el").unwrap(), TceMode::EL);
        assert!(TceMode::parse("XL").is_err());
    }

    #[test]
    fn timestep_embedding_is_distinct_per_step() {
        let e = timestep_embedding(&[1, 2, 100], 8);
        assert_eq!(e.shape(), &[3, 8]);
        let rows: Vec<&[f64]> = e.data().chunks(8).collect();
        assert_ne!(rows[0], rows[1]);
        assert_ne!(rows[1], rows[2]);
        // sin(1) at the first frequency, cos(1) in the second half
        assert!((rows[0][0] - 1f64.sin()).abs() < 1e-15);
        assert!((rows[0][4] - 1f64.cos()).abs() < 1e-15);
    }
}
