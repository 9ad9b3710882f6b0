use camorect_autograd::nn::{Conv2d, LayerNorm, Linear, ParamStore, Vars};
use camorect_autograd::Tensor;

use super::{timestep_embedding, ConditionalDistribution, ModelConfig, Source, TceMode, LEVELS};
use crate::error::{invalid, Result};

/// Side of a follower patch in pixels.
pub const PATCH: usize = 8;

/// The four layers whose outputs are fused, 1-based: the quarter points of
/// the stack (`{2, 4, 6, 8}` for eight layers).
pub fn tap_layers(layers: usize) -> [usize; 4] {
    let q = layers / 4;
    [q, 2 * q, 3 * q, 4 * q]
}

/// Token-sequence lengths seen by each layer, recorded during a forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenTrace {
    pub input_lens: Vec<usize>,
    pub output_lens: Vec<usize>,
    /// Which time token (if any) each layer received.
    pub time_token: Vec<Option<usize>>,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    up: Linear,
    down: Linear,
}

impl Block {
    fn new(i: usize, d: usize, hidden: usize) -> Self {
        let n = |s: &str| format!("tce.layer{i}.{s}");
        Block {
            ln1: LayerNorm::new(n("ln1"), d),
            q: Linear::new(n("q"), d, d, true),
            k: Linear::new(n("k"), d, d, true),
            v: Linear::new(n("v"), d, d, true),
            o: Linear::new(n("o"), d, d, true),
            ln2: LayerNorm::new(n("ln2"), d),
            up: Linear::new(n("up"), d, hidden, true),
            down: Linear::new(n("down"), hidden, d, true),
        }
    }

    fn register(&self, store: &mut ParamStore) -> Result<()> {
        self.ln1.register(store)?;
        for l in [&self.q, &self.k, &self.v, &self.o, &self.up, &self.down] {
            l.register(store)?;
        }
        self.ln2.register(store)?;
        Ok(())
    }

    /// Pre-norm single-head attention and MLP, both residual.
    fn forward(&self, vars: &Vars, x: &Tensor) -> Result<Tensor> {
        let d = self.q.in_dim as f64;
        let h = self.ln1.forward(vars, x)?;
        let q = self.q.forward(vars, &h)?;
        let k = self.k.forward(vars, &h)?;
        let v = self.v.forward(vars, &h)?;
        let scores = q.matmul(&k.transpose(1, 2)?)?.scale(1.0 / d.sqrt());
        let attended = scores.softmax_last()?.matmul(&v)?;
        let x = x.add(&self.o.forward(vars, &attended)?)?;
        let h = self.ln2.forward(vars, &x)?;
        let h = self.down.forward(vars, &self.up.forward(vars, &h)?.silu())?;
        Ok(x.add(&h)?)
    }
}

/// Token transformer over 8×8 patches with timestep tokens, fused into the
/// leader's pyramid shapes.
#[derive(Clone, Debug)]
pub struct TceEncoder {
    mode: TceMode,
    config: ModelConfig,
    patch: Conv2d,
    blocks: Vec<Block>,
    time_embeds: Vec<Linear>,
    fuse: Vec<Conv2d>,
}

impl TceEncoder {
    pub fn new(config: &ModelConfig, mode: TceMode) -> Self {
        let d = config.token_dim;
        let layers = config.tce_layers;
        let tokens = token_count(mode, layers);
        TceEncoder {
            mode,
            config: config.clone(),
            patch: Conv2d::new("tce.patch", 3, d, PATCH, PATCH, 0),
            blocks: (1..=layers).map(|i| Block::new(i, d, d * config.mlp_ratio)).collect(),
            time_embeds: (0..tokens)
                .map(|i| Linear::new(format!("tce.time{i}"), config.time_dim, d, true))
                .collect(),
            fuse: fuse_projections(config),
        }
    }

    pub fn mode(&self) -> TceMode {
        self.mode
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        self.patch.register(store)?;
        let n = self.num_tokens();
        store.init_uniform("tce.pos", &[n, self.config.token_dim], self.config.token_dim)?;
        for b in &self.blocks {
            b.register(store)?;
        }
        for l in &self.time_embeds {
            l.register(store)?;
        }
        for f in &self.fuse {
            f.register(store)?;
        }
        Ok(())
    }

    fn side(&self) -> usize {
        self.config.resolution / PATCH
    }

    fn num_tokens(&self) -> usize {
        self.side() * self.side()
    }

    /// Index of the time token fed to each layer (0-based layer index).
    pub fn schedule(&self) -> Vec<Option<usize>> {
        token_schedule(self.mode, self.config.tce_layers)
    }

    /// Returns the fused pyramid together with the per-layer token trace.
    pub fn forward(&self, vars: &Vars, x: &Tensor, t: &[usize]) -> Result<(ConditionalDistribution, TokenTrace)> {
        let batch = self.config.check_input(x, 3, "follower input")?;
        self.config.check_timesteps(t, batch)?;
        let (d, n) = (self.config.token_dim, self.num_tokens());
        let patches = self.patch.forward(vars, x)?.reshape(&[batch, d, n])?.transpose(1, 2)?;
        let mut h = patches.add(vars.get("tce.pos")?)?;

        let sinus = timestep_embedding(t, self.config.time_dim);
        let tokens: Vec<Tensor> = self
            .time_embeds
            .iter()
            .map(|l| l.forward(vars, &sinus)?.reshape(&[batch, 1, d]))
            .collect::<std::result::Result<_, _>>()?;

        let schedule = self.schedule();
        let taps = tap_layers(self.config.tce_layers);
        let mut trace = TokenTrace::default();
        let mut tapped = Vec::with_capacity(4);
        for (i, block) in self.blocks.iter().enumerate() {
            let input = match schedule[i] {
                Some(k) => Tensor::concat(&[h.clone(), tokens[k].clone()], 1)?,
                None => h.clone(),
            };
            trace.input_lens.push(input.dim(1));
            trace.time_token.push(schedule[i]);
            let out = block.forward(vars, &input)?;
            h = if out.dim(1) > n { out.narrow(1, 0, n)? } else { out };
            trace.output_lens.push(h.dim(1));
            if taps.contains(&(i + 1)) {
                tapped.push(h.clone());
            }
        }
        let mut c = fuse_layers(&tapped, &self.config, vars)?;
        c.time_conditioned = true;
        Ok((c, trace))
    }
}

fn token_count(mode: TceMode, layers: usize) -> usize {
    token_schedule(mode, layers).into_iter().flatten().max().map_or(0, |m| m + 1)
}

fn token_schedule(mode: TceMode, layers: usize) -> Vec<Option<usize>> {
    let taps = tap_layers(layers);
    (1..=layers)
        .map(|l| match mode {
            TceMode::FL => (l == 1).then_some(0),
            TceMode::OL => taps.iter().position(|&p| p == l),
            TceMode::GL => Some((l - 1) / 2),
            TceMode::EL => Some(l - 1),
        })
        .collect()
}

fn fuse_projections(config: &ModelConfig) -> Vec<Conv2d> {
    (0..LEVELS)
        .map(|i| Conv2d::new(format!("tce.fuse{i}"), config.token_dim, config.cond_channels, 1, 1, 0).without_bias())
        .collect()
}

/// Maps four tapped token sequences `[B, N, d]` onto the pyramid: each is
/// laid out as an `R/8` map, projected by a bias-free 1×1 convolution and
/// resampled to `R/4`, `R/8`, `R/16` and `R/32` respectively.
pub fn fuse_layers(features: &[Tensor], config: &ModelConfig, vars: &Vars) -> Result<ConditionalDistribution> {
    if features.len() != LEVELS {
        return Err(invalid(format!("fuse_layers needs {LEVELS} tapped layers, got {}", features.len())));
    }
    let side = config.resolution / PATCH;
    let projections = fuse_projections(config);
    let mut levels = Vec::with_capacity(LEVELS);
    for (i, (f, proj)) in features.iter().zip(&projections).enumerate() {
        if f.rank() != 3 || f.dim(1) != side * side || f.dim(2) != config.token_dim {
            return Err(invalid(format!(
                "tapped layer {i} must be [batch, {}, {}], got {:?}",
                side * side,
                config.token_dim,
                f.shape()
            )));
        }
        let batch = f.dim(0);
        let map = f.transpose(1, 2)?.reshape(&[batch, config.token_dim, side, side])?;
        let projected = proj.forward(vars, &map)?;
        let level = match i {
            0 => projected.upsample_nearest2d(2)?,
            1 => projected,
            2 => projected.avg_pool2d(2)?,
            _ => projected.avg_pool2d(4)?,
        };
        levels.push(level);
    }
    Ok(ConditionalDistribution {
        levels,
        source: Source::Follower,
        time_conditioned: false,
    })
}

/// Runs the follower encoder on a low-quality batch at timesteps `t`.
pub fn follower_encode(
    x_l: &Tensor,
    t: &[usize],
    config: &ModelConfig,
    params: &Vars,
    mode: TceMode,
) -> Result<ConditionalDistribution> {
    Ok(TceEncoder::new(config, mode).forward(params, x_l, t)?.0)
}
