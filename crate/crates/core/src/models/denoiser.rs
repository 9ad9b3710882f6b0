use camorect_autograd::nn::{Conv2d, Linear, ParamStore, Vars};
use camorect_autograd::Tensor;

use super::{timestep_embedding, ConditionalDistribution, HybridDistribution, ModelConfig, HYBRID_LAYERS, LEVELS, STEM_STRIDE};
use crate::error::{invalid, Result};

/// Mask logits at full resolution plus the decoder's hybrid features.
#[derive(Clone, Debug)]
pub struct DenoiseOutput {
    pub logits: Tensor,
    pub hybrid: HybridDistribution,
}

impl DenoiseOutput {
    /// Clean-mask prediction in the `[-1, 1]` noising domain.
    pub fn x0_pred(&self) -> Tensor {
        crate::diffusion::logits_to_x0(&self.logits)
    }
}

/// U-shaped mask denoiser. The encoder path runs at the pyramid scales and
/// fuses each conditional level by concatenation and a 1×1 projection; the
/// three decoder stages (`R/16`, `R/8`, `R/4`) are the hybrid features.
#[derive(Clone, Debug)]
pub struct Denoiser {
    config: ModelConfig,
    stem: Conv2d,
    time: Linear,
    inject: Vec<Conv2d>,
    blocks: Vec<Conv2d>,
    downs: Vec<Conv2d>,
    decoder: Vec<Conv2d>,
    head: Conv2d,
}

impl Denoiser {
    pub fn new(config: &ModelConfig) -> Self {
        let (d, c) = (config.denoiser_channels, config.cond_channels);
        Denoiser {
            config: config.clone(),
            stem: Conv2d::new("den.stem", 1, d, STEM_STRIDE, STEM_STRIDE, 0),
            time: Linear::new("den.time", config.time_dim, d, true),
            inject: (0..LEVELS).map(|i| Conv2d::new(format!("den.inject{i}"), d + c, d, 1, 1, 0)).collect(),
            blocks: (0..LEVELS).map(|i| Conv2d::new(format!("den.block{i}"), d, d, 3, 1, 1)).collect(),
            downs: (1..LEVELS).map(|i| Conv2d::new(format!("den.down{i}"), d, d, 2, 2, 0)).collect(),
            decoder: (0..HYBRID_LAYERS).map(|i| Conv2d::new(format!("den.dec{i}"), 2 * d, d, 3, 1, 1)).collect(),
            head: Conv2d::new("den.head", d, STEM_STRIDE * STEM_STRIDE, 1, 1, 0),
        }
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        self.stem.register(store)?;
        self.time.register(store)?;
        for conv in self.inject.iter().chain(&self.blocks).chain(&self.downs).chain(&self.decoder) {
            conv.register(store)?;
        }
        Ok(self.head.register(store)?)
    }

    /// `m_t: [B, 1, R, R]`, one timestep per batch element.
    pub fn forward(&self, vars: &Vars, m_t: &Tensor, t: &[usize], c: &ConditionalDistribution) -> Result<DenoiseOutput> {
        let batch = self.config.check_input(m_t, 1, "noisy mask")?;
        self.config.check_timesteps(t, batch)?;
        self.check_condition(c, batch)?;
        let d = self.config.denoiser_channels;

        let temb = self
            .time
            .forward(vars, &timestep_embedding(t, self.config.time_dim))?
            .reshape(&[batch, d, 1, 1])?;
        let mut h = self.stem.forward(vars, m_t)?.add(&temb)?.silu();
        let mut skips = Vec::with_capacity(LEVELS);
        for i in 0..LEVELS {
            if i > 0 {
                h = self.downs[i - 1].forward(vars, &h)?.silu();
            }
            h = self.inject[i].forward(vars, &Tensor::concat(&[h, c.levels[i].clone()], 1)?)?.silu();
            h = h.add(&self.blocks[i].forward(vars, &h)?.silu())?;
            skips.push(h.clone());
        }

        let mut layers = Vec::with_capacity(HYBRID_LAYERS);
        for (j, dec) in self.decoder.iter().enumerate() {
            let skip = &skips[LEVELS - 2 - j];
            let up = h.upsample_nearest2d(2)?;
            h = dec.forward(vars, &Tensor::concat(&[up, skip.clone()], 1)?)?.silu();
            layers.push(h.clone());
        }
        let logits = pixel_shuffle(&self.head.forward(vars, &h)?, STEM_STRIDE)?;
        Ok(DenoiseOutput {
            logits,
            hybrid: HybridDistribution { layers, t: t.to_vec() },
        })
    }

    fn check_condition(&self, c: &ConditionalDistribution, batch: usize) -> Result<()> {
        if c.levels.len() != LEVELS {
            return Err(invalid(format!("condition has {} levels, expected {LEVELS}", c.levels.len())));
        }
        for (i, (level, want)) in c.levels.iter().zip(self.config.level_shapes()).enumerate() {
            if level.rank() != 4 || level.dim(0) != batch || level.shape()[1..] != want {
                return Err(invalid(format!(
                    "condition level {i} is {:?}, injection point expects [{batch}, {}, {}, {}]",
                    level.shape(),
                    want[0],
                    want[1],
                    want[2]
                )));
            }
        }
        Ok(())
    }
}

/// `[B, r·r, h, w] → [B, 1, r·h, r·w]`.
fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, h, w) = (x.dim(0), x.dim(2), x.dim(3));
    Ok(x
        .reshape(&[b, r, r, h, w])?
        .permute(&[0, 3, 1, 4, 2])?
        .reshape(&[b, 1, h * r, w * r])?)
}

/// One denoiser pass: clean-mask logits and the decoder's hybrid features.
pub fn denoise(m_t: &Tensor, t: &[usize], c: &ConditionalDistribution, config: &ModelConfig, params: &Vars) -> Result<DenoiseOutput> {
    Denoiser::new(config).forward(params, m_t, t, c)
}
