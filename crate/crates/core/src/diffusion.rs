//! Forward noising, the Gaussian posterior of the forward chain, ancestral
//! sampling and the diagonal-Gaussian KL divergence.
//!
//! Timesteps are 1-based: `t ∈ [1, T]`, with `ᾱ₀ = 1` implied.
//!
//! Masks live in `[-1, 1]` while they are being noised; denoisers predict the
//! clean mask as logits, so `x̂₀ = 2σ(logits) − 1 = tanh(logits / 2)`.

use camorect_autograd::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScheduleKind {
    /// β linearly spaced from `beta_min` (t = 1) to `beta_max` (t = T).
    Linear { beta_min: f64, beta_max: f64 },
    /// The squared-cosine ᾱ schedule with offset `s = 0.008`, β capped at
    /// 0.999.
    Cosine,
}

impl ScheduleKind {
    /// Linear range `[1e-4, 0.02]` rescaled by `1000 / T`, so shorter chains
    /// still end close to pure noise. At `T = 1000` this is the classic DDPM
    /// range.
    pub fn linear_for(t_max: usize) -> Self {
        let scale = 1000.0 / t_max.max(1) as f64;
        ScheduleKind::Linear {
            beta_min: (1e-4 * scale).min(0.5),
            beta_max: (0.02 * scale).min(0.999),
        }
    }

    pub fn parse(name: &str, t_max: usize) -> Result<Self> {
        match name {
            "linear" => Ok(ScheduleKind::linear_for(t_max)),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(invalid(format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// Precomputed `β`, `α = 1 − β` and `ᾱ = ∏ α` for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(t_max: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(invalid("schedule needs T >= 1"));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear { beta_min, beta_max } => {
            if !(beta_min > 0.0 && beta_max < 1.0 && beta_min <= beta_max) {
                return Err(invalid(format!(
                    "linear schedule needs 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
                )));
            }
            if t_max == 1 {
                vec![beta_min]
            } else {
                (0..t_max)
                    .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (t_max - 1) as f64)
                    .collect()
            }
        }
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| (((t / t_max as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (1..=t_max)
                .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(1e-8, 0.999))
                .collect()
        }
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        kind,
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱₜ`, with `ᾱ₀ = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(invalid(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    /// Coefficients `(c₀, cₜ, σ²)` of `q(x_s | x_t, x₀) = N(c₀x₀ + cₜxₜ, σ²)`
    /// for `0 <= s < t`.
    pub fn posterior_coefficients(&self, t: usize, s: usize) -> Result<(f64, f64, f64)> {
        self.check_t(t)?;
        if s >= t {
            return Err(invalid(format!("posterior target {s} must precede {t}")));
        }
        let (ab_t, ab_s) = (self.alpha_bar(t), self.alpha_bar(s));
        let a_ts = ab_t / ab_s;
        let b_ts = 1.0 - a_ts;
        let c0 = ab_s.sqrt() * b_ts / (1.0 - ab_t);
        let ct = a_ts.sqrt() * (1.0 - ab_s) / (1.0 - ab_t);
        let var = (1.0 - ab_s) / (1.0 - ab_t) * b_ts;
        Ok((c0, ct, var))
    }
}

/// A noised mask `xₜ` together with its timestep.
#[derive(Clone, Debug)]
pub struct NoisyMask {
    pub values: Tensor,
    pub t: usize,
}

/// `xₜ = √ᾱₜ·x₀ + √(1−ᾱₜ)·ε`.
pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<NoisyMask> {
    schedule.check_t(t)?;
    same_shape(x0, eps, "forward_noise")?;
    let ab = schedule.alpha_bar(t);
    let values = combine(x0, ab.sqrt(), eps, (1.0 - ab).sqrt());
    Ok(NoisyMask { values, t })
}

/// One step of the forward chain, `xₜ = √αₜ·xₜ₋₁ + √βₜ·ε`.
pub fn forward_step(x_prev: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    same_shape(x_prev, eps, "forward_step")?;
    Ok(combine(x_prev, schedule.alpha(t).sqrt(), eps, schedule.beta(t).sqrt()))
}

/// Mean and variance of `q(xₜ₋₁ | xₜ, x₀)`; defined for `t >= 2`.
pub fn posterior_params(x0: &Tensor, xt: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<(Tensor, f64)> {
    if t < 2 {
        return Err(invalid(format!(
            "posterior_params needs t >= 2 (t = 1 is the terminal x0 prediction), got {t}"
        )));
    }
    posterior_between(x0, xt, t, t - 1, schedule)
}

/// Mean and variance of `q(x_s | xₜ, x₀)` for any `s < t`.
pub fn posterior_between(x0: &Tensor, xt: &Tensor, t: usize, s: usize, schedule: &NoiseSchedule) -> Result<(Tensor, f64)> {
    same_shape(x0, xt, "posterior")?;
    let (c0, ct, var) = schedule.posterior_coefficients(t, s)?;
    Ok((combine(x0, c0, xt, ct), var))
}

/// One reverse step `t → t−1`: posterior mean plus `√σ²·noise`; at `t = 1`
/// returns `x0_pred` unchanged.
pub fn ancestral_step(xt: &Tensor, x0_pred: &Tensor, t: usize, schedule: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    ancestral_step_to(xt, x0_pred, t, t.saturating_sub(1), schedule, noise)
}

/// Reverse step from `t` to an earlier `s`, used by strided samplers.
pub fn ancestral_step_to(
    xt: &Tensor,
    x0_pred: &Tensor,
    t: usize,
    s: usize,
    schedule: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    same_shape(xt, noise, "ancestral_step")?;
    same_shape(xt, x0_pred, "ancestral_step")?;
    if t == 1 || s == 0 {
        return Ok(x0_pred.detach());
    }
    let (mean, var) = posterior_between(x0_pred, xt, t, s, schedule)?;
    if var == 0.0 {
        return Ok(mean);
    }
    Ok(mean.add(&noise.scale(var.sqrt()))?)
}

/// Evenly spaced, strictly decreasing timesteps from `T` down to `1`.
/// A single step uses `[T]`.
pub fn sampling_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(invalid("sampling needs at least one step"));
    }
    if steps > t_max {
        return Err(invalid(format!("{steps} sampling steps exceed T = {t_max}")));
    }
    if steps == 1 {
        return Ok(vec![t_max]);
    }
    let span = (t_max - 1) as f64;
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| (t_max as f64 - span * i as f64 / (steps - 1) as f64).round() as usize)
        .collect();
    ts.dedup();
    Ok(ts)
}

/// Converts denoiser logits into the `[-1, 1]` mask domain.
pub fn logits_to_x0(logits: &Tensor) -> Tensor {
    logits.scale(0.5).tanh()
}

/// Mask-free sampling: starts from `N(0, I)` noise of `shape` and walks the
/// strided reverse chain. `denoiser(xₜ, t)` returns clean-mask logits; the
/// result is `σ(logits)` of the final prediction, in `[0, 1]`.
pub fn sample<F>(schedule: &NoiseSchedule, steps: usize, shape: &[usize], rng_seed: u64, mut denoiser: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let ts = sampling_timesteps(schedule.steps(), steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut xt = gaussian(shape, &mut rng);
    for (i, &t) in ts.iter().enumerate() {
        let logits = denoiser(&xt, t)?;
        same_shape(&xt, &logits, "sample")?;
        match ts.get(i + 1) {
            Some(&s) => {
                let noise = gaussian(shape, &mut rng);
                xt = ancestral_step_to(&xt, &logits_to_x0(&logits), t, s, schedule, &noise)?;
            }
            None => {
                let probs = logits.sigmoid().data().iter().map(|p| p.clamp(0.0, 1.0)).collect();
                return Ok(Tensor::from_vec(probs, shape)?);
            }
        }
    }
    unreachable!("sampling_timesteps is never empty")
}

/// Standard-normal tensor drawn from `rng`.
pub fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(data, shape).expect("length matches shape")
}

/// `Σ KL(N(μ₁, σ₁²) ‖ N(μ₂, σ₂²))` over elements of diagonal Gaussians.
pub fn kl_gaussian(mu1: &Tensor, var1: &Tensor, mu2: &Tensor, var2: &Tensor) -> Result<f64> {
    same_shape(mu1, var1, "kl_gaussian")?;
    same_shape(mu1, mu2, "kl_gaussian")?;
    same_shape(mu1, var2, "kl_gaussian")?;
    if var1.data().iter().chain(var2.data()).any(|&v| !(v > 0.0)) {
        return Err(invalid("kl_gaussian needs strictly positive variances"));
    }
    let kl = (0..mu1.numel())
        .map(|i| {
            let (m1, v1, m2, v2) = (mu1.data()[i], var1.data()[i], mu2.data()[i], var2.data()[i]);
            0.5 * ((v2 / v1).ln() + (v1 + (m1 - m2).powi(2)) / v2 - 1.0)
        })
        .sum();
    Ok(kl)
}

fn combine(a: &Tensor, ca: f64, b: &Tensor, cb: f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| ca * x + cb * y).collect();
    Tensor::from_vec(data, a.shape()).expect("shapes checked by caller")
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid(format!("{op}: shape {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}
