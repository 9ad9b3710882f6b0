//! Distribution distances between follower and leader features, and the
//! conditional (CDC), hybrid (HDC) and cross-view (CC) rectification losses
//! built from them.
//!
//! Feature tensors are `[B, C, ...spatial]`. The second argument of every
//! distance is the leader's gold-standard feature and never receives a
//! gradient.

use std::collections::BTreeSet;

use camorect_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::models::{ConditionalDistribution, HybridDistribution, HYBRID_LAYERS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Mae,
    Mse,
    Mmd,
    Fa,
    Cs,
    Kl,
}

impl MetricKind {
    pub const ALL: [MetricKind; 6] = [
        MetricKind::Mae,
        MetricKind::Mse,
        MetricKind::Mmd,
        MetricKind::Fa,
        MetricKind::Cs,
        MetricKind::Kl,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "mae" => Ok(MetricKind::Mae),
            "mse" => Ok(MetricKind::Mse),
            "mmd" => Ok(MetricKind::Mmd),
            "fa" => Ok(MetricKind::Fa),
            "cs" => Ok(MetricKind::Cs),
            "kl" => Ok(MetricKind::Kl),
            _ => Err(invalid(format!("unknown distance metric `{name}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Mae => "MAE",
            MetricKind::Mse => "MSE",
            MetricKind::Mmd => "MMD",
            MetricKind::Fa => "FA",
            MetricKind::Cs => "CS",
            MetricKind::Kl => "KL",
        }
    }
}

/// A distance together with its options.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistMetric {
    pub name: MetricKind,
    /// Softmax temperature of the KL form.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Cap on the positions entering the FA affinity matrices.
    #[serde(default = "default_fa_positions")]
    pub fa_positions: usize,
}

fn default_temperature() -> f64 {
    1.0
}

fn default_fa_positions() -> usize {
    64
}

impl DistMetric {
    pub fn new(name: MetricKind) -> Self {
        DistMetric {
            name,
            temperature: default_temperature(),
            fa_positions: default_fa_positions(),
        }
    }
}

impl Default for DistMetric {
    fn default() -> Self {
        DistMetric::new(MetricKind::Kl)
    }
}

/// Which rectification terms are active and how they are weighted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectificationConfig {
    pub cdc_enabled: bool,
    pub hdc_enabled: bool,
    /// 1-based decoder layers used by HDC.
    pub hdc_layers: Vec<usize>,
    pub cc_enabled: bool,
    pub metric_cdc: DistMetric,
    pub metric_hdc: DistMetric,
    pub weight_cdc: f64,
    pub weight_hdc: f64,
}

impl Default for RectificationConfig {
    fn default() -> Self {
        RectificationConfig {
            cdc_enabled: true,
            hdc_enabled: true,
            hdc_layers: vec![2, 3],
            cc_enabled: true,
            metric_cdc: DistMetric::default(),
            metric_hdc: DistMetric::default(),
            weight_cdc: 1.0,
            weight_hdc: 1.0,
        }
    }
}

impl RectificationConfig {
    /// Everything off: plain diffusion training.
    pub fn disabled() -> Self {
        RectificationConfig {
            cdc_enabled: false,
            hdc_enabled: false,
            cc_enabled: false,
            ..RectificationConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hdc_enabled && self.hdc_layers.is_empty() {
            return Err(invalid("hdc_enabled requires at least one hdc layer"));
        }
        check_layers(&self.hdc_layers)?;
        if !(self.weight_cdc >= 0.0 && self.weight_hdc >= 0.0) {
            return Err(invalid("rectification weights must be non-negative"));
        }
        Ok(())
    }

    pub fn any_enabled(&self) -> bool {
        self.cdc_enabled || self.hdc_enabled
    }
}

fn check_layers(layers: &[usize]) -> Result<()> {
    let unique: BTreeSet<_> = layers.iter().collect();
    if unique.len() != layers.len() || layers.iter().any(|&l| l < 1 || l > HYBRID_LAYERS) {
        return Err(invalid(format!("hdc layers must be distinct values in 1..={HYBRID_LAYERS}, got {layers:?}")));
    }
    Ok(())
}

/// Distance between follower features `p` and leader features `q`, as a
/// differentiable scalar.
pub fn dist_metric(metric: &DistMetric, p: &Tensor, q: &Tensor) -> Result<Tensor> {
    if p.shape() != q.shape() {
        return Err(invalid(format!("dist_metric: shape {:?} vs {:?}", p.shape(), q.shape())));
    }
    if p.rank() < 2 || p.numel() == 0 {
        return Err(invalid(format!("dist_metric needs [batch, channels, ...], got {:?}", p.shape())));
    }
    let q = q.detach();
    let (b, c) = (p.dim(0), p.dim(1));
    let s = p.numel() / (b * c);
    let p3 = p.reshape(&[b, c, s])?;
    let q3 = q.reshape(&[b, c, s])?;
    match metric.name {
        MetricKind::Mae => Ok(p.sub(&q)?.abs().mean_all()),
        MetricKind::Mse => Ok(p.sub(&q)?.sqr().mean_all()),
        MetricKind::Kl => kl(&p3, &q3, metric.temperature),
        MetricKind::Cs => cosine(&p3, &q3),
        MetricKind::Mmd => mmd(&p3, &q3),
        MetricKind::Fa => affinity(&p3, &q3, metric.fa_positions),
    }
}

/// `KL(softmax(q/τ) ‖ softmax(p/τ))` over the spatial axis, averaged over
/// batch and channels.
fn kl(p: &Tensor, q: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(invalid("KL temperature must be positive"));
    }
    let (b, c, s) = (p.dim(0), p.dim(1), p.dim(2));
    let log_p = p.scale(1.0 / tau).reshape(&[b * c, s])?.log_softmax_last()?;
    let log_t = q.scale(1.0 / tau).reshape(&[b * c, s])?.log_softmax_last()?;
    let target = log_t.exp();
    Ok(target.mul(&log_t.sub(&log_p)?)?.sum_all().scale(1.0 / (b * c) as f64))
}

/// `1 − mean cos(p, q)` with cosines taken over channels at every position.
/// Denominators are `max(‖p‖‖q‖, 1e-8)`.
fn cosine(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    const EPS: f64 = 1e-8;
    let dot = p.mul(q)?.sum_axis(1)?;
    let p_sq = p.sqr().sum_axis(1)?;
    let q_norm: Vec<f64> = q.sqr().sum_axis(1)?.data().iter().map(|v| v.sqrt()).collect();
    let clipped: Vec<bool> = p_sq.data().iter().zip(&q_norm).map(|(ps, qn)| ps.sqrt() * qn < EPS).collect();
    let shape = dot.shape().to_vec();
    let keep = Tensor::from_vec(clipped.iter().map(|&c| if c { 0.0 } else { 1.0 }).collect(), &shape)?;
    let fill = Tensor::from_vec(clipped.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect(), &shape)?;
    let q_scale = Tensor::from_vec(
        clipped.iter().zip(&q_norm).map(|(&c, qn)| if c { 0.0 } else { *qn }).collect(),
        &shape,
    )?;
    // clipped positions see a constant denominator and an untouched sqrt
    let p_norm = p_sq.mul(&keep)?.add(&fill)?.sqrt();
    let denom = p_norm.mul(&q_scale)?.add(&fill.scale(EPS))?;
    Ok(dot.div(&denom)?.mean_all().neg().add_scalar(1.0))
}

/// Squared RBF-kernel MMD (biased V-statistic) between the spatial feature
/// vectors of `p` and `q`, averaged over the batch. The bandwidth is the
/// median pairwise distance of the pooled points, or 1 if that is zero.
fn mmd(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    let (b, c, s) = (p.dim(0), p.dim(1), p.dim(2));
    let mut total: Option<Tensor> = None;
    for bi in 0..b {
        let x = p.narrow(0, bi, 1)?.reshape(&[c, s])?.transpose(0, 1)?;
        let y = q.narrow(0, bi, 1)?.reshape(&[c, s])?.transpose(0, 1)?;
        let term = mmd_points(&x, &y)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("batch is non-empty").scale(1.0 / b as f64))
}

/// MMD² between point sets `x: [n, d]` and `y: [n, d]`.
pub(crate) fn mmd_points(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (n, d) = (x.dim(0), x.dim(1));
    let z = Tensor::concat(&[x.clone(), y.clone()], 0)?;
    let m = 2 * n;
    let diff = z.reshape(&[m, 1, d])?.sub(&z.reshape(&[1, m, d])?)?;
    let d2 = diff.sqr().sum_axis(2)?.reshape(&[m, m])?;

    let mut off_diag: Vec<(f64, usize)> = (0..m)
        .flat_map(|i| ((i + 1)..m).map(move |j| (i, j)))
        .map(|(i, j)| (d2.data()[i * m + j], i * m + j))
        .collect();
    off_diag.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mid = off_diag.len() / 2;
    let picks = if off_diag.len() % 2 == 1 {
        vec![off_diag[mid].1]
    } else {
        vec![off_diag[mid - 1].1, off_diag[mid].1]
    };
    let picked = d2.gather_flat(&picks)?;
    let sigma = if picked.data().iter().all(|&v| v <= 0.0) {
        Tensor::scalar(1.0)
    } else {
        picked.sqrt().mean_all()
    };
    let gamma = sigma.sqr().scale(2.0).reshape(&[1, 1])?;
    let k = d2.neg().div(&gamma)?.exp();
    let kxx = k.narrow(0, 0, n)?.narrow(1, 0, n)?.mean_all();
    let kyy = k.narrow(0, n, n)?.narrow(1, n, n)?.mean_all();
    let kxy = k.narrow(0, 0, n)?.narrow(1, n, n)?.mean_all();
    Ok(kxx.add(&kyy)?.sub(&kxy.scale(2.0))?)
}

/// Mean squared difference of the cosine-affinity matrices over at most
/// `cap` evenly strided positions.
fn affinity(p: &Tensor, q: &Tensor, cap: usize) -> Result<Tensor> {
    if cap == 0 {
        return Err(invalid("FA position cap must be positive"));
    }
    let (b, c, s) = (p.dim(0), p.dim(1), p.dim(2));
    let m = s.min(cap);
    let positions: Vec<usize> = (0..m).map(|i| i * s / m).collect();
    let rows = |t: &Tensor| -> Result<Tensor> {
        let points = t.transpose(1, 2)?;
        let idx: Vec<usize> = (0..b)
            .flat_map(|bi| positions.iter().flat_map(move |&pos| (0..c).map(move |ch| (bi * s + pos) * c + ch)))
            .collect();
        let picked = points.gather_flat(&idx)?.reshape(&[b, m, c])?;
        let norm = picked.sqr().sum_axis(2)?.add_scalar(1e-12).sqrt();
        let unit = picked.div(&norm)?;
        Ok(unit.matmul(&unit.transpose(1, 2)?)?)
    };
    let ap = rows(p)?;
    let aq = rows(&q.detach())?;
    Ok(ap.sub(&aq)?.sqr().mean_all())
}

fn contract(location: String, leader: &Tensor, follower: &Tensor) -> Error {
    Error::Contract {
        location,
        leader: leader.shape().to_vec(),
        follower: follower.shape().to_vec(),
    }
}

/// Sum over pyramid levels of the distance between follower and (detached)
/// leader conditional features.
pub fn cdc_loss(c_l: &ConditionalDistribution, c_h: &ConditionalDistribution, metric: &DistMetric) -> Result<Tensor> {
    if c_l.levels.len() != c_h.levels.len() || c_l.levels.is_empty() {
        return Err(invalid(format!(
            "cdc_loss: follower has {} levels, leader {}",
            c_l.levels.len(),
            c_h.levels.len()
        )));
    }
    let mut total = Tensor::scalar(0.0);
    for (i, (f, l)) in c_l.levels.iter().zip(&c_h.levels).enumerate() {
        if f.shape() != l.shape() {
            return Err(contract(format!("conditional level {i}"), l, f));
        }
        total = total.add(&dist_metric(metric, f, &l.detach())?)?;
    }
    Ok(total)
}

/// Sum over the selected 1-based decoder layers of the distance between
/// follower and (detached) leader hybrid features.
pub fn hdc_loss(d_l: &HybridDistribution, d_h: &HybridDistribution, layers: &[usize], metric: &DistMetric) -> Result<Tensor> {
    if layers.is_empty() {
        return Err(invalid("hdc_loss needs at least one layer"));
    }
    check_layers(layers)?;
    if d_l.layers.len() != HYBRID_LAYERS || d_h.layers.len() != HYBRID_LAYERS {
        return Err(invalid(format!(
            "hdc_loss expects {HYBRID_LAYERS} decoder layers, got {} and {}",
            d_l.layers.len(),
            d_h.layers.len()
        )));
    }
    let mut total = Tensor::scalar(0.0);
    for &layer in layers {
        let (f, l) = (&d_l.layers[layer - 1], &d_h.layers[layer - 1]);
        if f.shape() != l.shape() {
            return Err(contract(format!("hybrid layer {layer}"), l, f));
        }
        total = total.add(&dist_metric(metric, f, &l.detach())?)?;
    }
    Ok(total)
}

/// Follower and leader distributions for one augmented view.
#[derive(Clone, Debug)]
pub struct RectView {
    pub c_l: ConditionalDistribution,
    pub c_h: ConditionalDistribution,
    pub d_l: HybridDistribution,
    pub d_h: HybridDistribution,
}

/// `weight_cdc·CDC + weight_hdc·HDC` of a single view, honouring the enable
/// flags.
pub fn view_loss(view: &RectView, config: &RectificationConfig) -> Result<Tensor> {
    config.validate()?;
    let mut total = Tensor::scalar(0.0);
    if config.cdc_enabled {
        total = total.add(&cdc_loss(&view.c_l, &view.c_h, &config.metric_cdc)?.scale(config.weight_cdc))?;
    }
    if config.hdc_enabled {
        let hdc = hdc_loss(&view.d_l, &view.d_h, &config.hdc_layers, &config.metric_hdc)?;
        total = total.add(&hdc.scale(config.weight_hdc))?;
    }
    Ok(total)
}

/// Rectification loss summed over the two views `a` and `A`. With CC
/// disabled only `view_a` contributes.
pub fn cc_losses(view_a: &RectView, view_big_a: Option<&RectView>, config: &RectificationConfig) -> Result<Tensor> {
    let first = view_loss(view_a, config)?;
    if !config.cc_enabled {
        return Ok(first);
    }
    let second = view_big_a.ok_or_else(|| invalid("cross-consistency needs a second view"))?;
    Ok(first.add(&view_loss(second, config)?)?)
}
