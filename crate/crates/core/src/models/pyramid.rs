use camorect_autograd::nn::{Conv2d, ParamStore, Vars};
use camorect_autograd::Tensor;

use super::{ConditionalDistribution, ModelConfig, Source, LEVELS, STEM_STRIDE};
use crate::error::Result;

/// Convolutional pyramid: a stride-4 patchify stem, then a residual 3×3
/// block per level with stride-2 downsampling in between.
#[derive(Clone, Debug)]
pub struct PyramidEncoder {
    stem: Conv2d,
    blocks: Vec<Conv2d>,
    downs: Vec<Conv2d>,
    config: ModelConfig,
}

impl PyramidEncoder {
    pub fn new(config: &ModelConfig) -> Self {
        let c = config.cond_channels;
        PyramidEncoder {
            stem: Conv2d::new("pyr.stem", 3, c, STEM_STRIDE, STEM_STRIDE, 0),
            blocks: (0..LEVELS).map(|i| Conv2d::new(format!("pyr.block{i}"), c, c, 3, 1, 1)).collect(),
            downs: (1..LEVELS).map(|i| Conv2d::new(format!("pyr.down{i}"), c, c, 2, 2, 0)).collect(),
            config: config.clone(),
        }
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        self.stem.register(store)?;
        for layer in self.blocks.iter().chain(&self.downs) {
            layer.register(store)?;
        }
        Ok(())
    }

    pub fn forward(&self, vars: &Vars, x: &Tensor) -> Result<ConditionalDistribution> {
        self.config.check_input(x, 3, "encoder input")?;
        let mut h = self.stem.forward(vars, x)?.silu();
        let mut levels = Vec::with_capacity(LEVELS);
        for i in 0..LEVELS {
            if i > 0 {
                h = self.downs[i - 1].forward(vars, &h)?.silu();
            }
            h = h.add(&self.blocks[i].forward(vars, &h)?.silu())?;
            levels.push(h.clone());
        }
        Ok(ConditionalDistribution {
            levels,
            source: Source::Leader,
            time_conditioned: false,
        })
    }
}

/// Runs the leader's pyramid encoder on a high-quality batch `[B, 3, R, R]`.
pub fn leader_encode(x_h: &Tensor, config: &ModelConfig, params: &Vars) -> Result<ConditionalDistribution> {
    PyramidEncoder::new(config).forward(params, x_h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use camorect_autograd::nn::Tracking;

    fn setup(resolution: usize) -> (ModelConfig, ParamStore) {
        let cfg = ModelConfig {
            resolution,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new(3);
        PyramidEncoder::new(&cfg).register(&mut store).unwrap();
        (cfg, store)
    }

    #[test]
    fn zero_image_gives_finite_levels() {
        let (cfg, store) = setup(64);
        let c = leader_encode(&Tensor::zeros(&[1, 3, 64, 64]), &cfg, &store.bind(Tracking::Constant)).unwrap();
        assert!(c.levels.iter().all(Tensor::all_finite));
    }

    #[test]
    fn level_shapes_at_64() {
        let (cfg, store) = setup(64);
        let c = leader_encode(&Tensor::zeros(&[2, 3, 64, 64]), &cfg, &store.bind(Tracking::Constant)).unwrap();
        let sides: Vec<usize> = c.levels.iter().map(|l| l.dim(2)).collect();
        assert_eq!(sides, vec![16, 8, 4, 2]);
        for (l, want) in c.levels.iter().zip(cfg.level_shapes()) {
            assert_eq!(&l.shape()[1..], &want);
            assert_eq!(l.dim(0), 2);
        }
    }

    #[test]
    fn repeated_calls_are_bit_identical() {
        let (cfg, store) = setup(32);
        let x = Tensor::from_vec((0..3 * 32 * 32).map(|i| (i as f64 * 0.37).sin()).collect(), &[1, 3, 32, 32]).unwrap();
        let vars = store.bind(Tracking::Constant);
        let a = leader_encode(&x, &cfg, &vars).unwrap();
        let b = leader_encode(&x, &cfg, &vars).unwrap();
        for (p, q) in a.levels.iter().zip(&b.levels) {
            assert_eq!(p.data(), q.data());
        }
    }

    #[test]
    fn rejects_wrong_resolution() {
        let (cfg, store) = setup(64);
        let vars = store.bind(Tracking::Constant);
        assert!(leader_encode(&Tensor::zeros(&[1, 3, 48, 48]), &cfg, &vars).is_err());
        assert!(leader_encode(&Tensor::zeros(&[1, 1, 64, 64]), &cfg, &vars).is_err());
    }
}
