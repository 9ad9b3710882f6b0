use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use camorect_autograd::nn::{AdamW, Tracking};
use camorect_autograd::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, OptimizerState, Role};
use super::config::TrainConfig;
use super::loss::structure_loss;
use crate::data::{images_to_tensor, load_corpus, masks_to_tensor, sample_id, AugParams, Corpus, Rgb, Split};
use crate::metrics::{evaluate_pairs, EvalReport};
use crate::diffusion::NoiseSchedule;
use crate::error::{invalid, io_err, Error, Result};
use crate::models::{BoundModel, ConditionalDistribution, ConditionalModel, EncoderKind, HybridDistribution};
use crate::plane::Plane;
use crate::rectification::{cc_losses, RectView, RectificationConfig};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CONFIG_FILE: &str = "config.toml";

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub structure: f64,
    pub rectification: f64,
}

/// Result of one leader-gradient audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub epoch: usize,
    pub step: usize,
    pub leader_params: usize,
    /// Leader parameters that received any gradient entry.
    pub params_reached: usize,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
    pub epoch_losses: Vec<f64>,
    pub audits: Vec<AuditRecord>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

// independent random streams of a run
const STREAM_PERM: u64 = 1;
const STREAM_AUG: u64 = 2;
const STREAM_PRIMARY: u64 = 3;
const STREAM_LEADER: u64 = 4;
const STREAM_INIT_LEADER: u64 = 5;
const STREAM_INIT_FOLLOWER: u64 = 6;
const STREAM_SAMPLE: u64 = 7;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of a named sub-stream, e.g. `(seed, [STREAM_AUG, epoch, id])`.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(seed), |h, &p| splitmix(h ^ p))
}

/// Parameter-init seed of the leader or follower of a run.
pub fn init_seed(seed: u64, role: Role) -> u64 {
    let stream = match role {
        Role::Leader => STREAM_INIT_LEADER,
        Role::Follower => STREAM_INIT_FOLLOWER,
    };
    derive_seed(seed, &[stream])
}

/// A training sample with its LQ image already enlarged to full size.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub seed: u64,
    pub hq: Rgb,
    pub lq: Rgb,
    pub mask: Plane,
}

pub fn prepare_split(corpus: &Corpus, split: Split, scale: usize, limit: Option<usize>) -> Result<Vec<Prepared>> {
    let samples = corpus.split(split);
    let n = limit.map_or(samples.len(), |l| l.min(samples.len()));
    samples[..n]
        .iter()
        .map(|s| {
            Ok(Prepared {
                seed: s.seed,
                hq: s.image_hq.clone(),
                lq: s.input_at(scale)?,
                mask: s.mask.clone(),
            })
        })
        .collect()
}

/// Inputs and diffusion draws of one optimizer step. Views are stacked
/// along the batch axis: rows `v·B .. (v+1)·B` belong to view `v`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub views: usize,
    pub per_view: usize,
    pub x_h: Tensor,
    pub x_l: Tensor,
    pub mask: Tensor,
    /// Timesteps and noise of the model being trained.
    pub t: Vec<usize>,
    pub eps: Vec<f64>,
    /// Independent timesteps and noise for the leader's view of the batch.
    pub t_leader: Vec<usize>,
    pub eps_leader: Vec<f64>,
}

fn draws(n: usize, numel: usize, t_max: usize, seed: u64) -> (Vec<usize>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = (0..n).map(|_| rng.random_range(1..=t_max)).collect();
    let eps = (0..numel).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    (t, eps)
}

/// The two augmentation descriptors of a sample in an epoch.
pub fn epoch_aug_params(seed: u64, epoch: usize, sample_seed: u64) -> (AugParams, AugParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_AUG, epoch as u64, sample_seed]));
    (AugParams::sample(&mut rng), AugParams::sample(&mut rng))
}

pub fn make_batch(
    data: &[Prepared],
    indices: &[usize],
    views: usize,
    cfg: &TrainConfig,
    epoch: usize,
    step: usize,
) -> Result<Batch> {
    if indices.is_empty() || !(1..=2).contains(&views) {
        return Err(invalid("a batch needs samples and one or two views"));
    }
    let (mut hq, mut lq, mut masks) = (Vec::new(), Vec::new(), Vec::new());
    for v in 0..views {
        for &i in indices {
            let s = &data[i];
            let (a, b) = epoch_aug_params(cfg.seed, epoch, s.seed);
            let p = if v == 0 { a } else { b };
            hq.push(p.apply_image(&s.hq));
            lq.push(p.apply_image(&s.lq));
            masks.push(p.apply_mask(&s.mask));
        }
    }
    let n = views * indices.len();
    let r = cfg.model.resolution;
    let (e, st) = (epoch as u64, step as u64);
    let (t, eps) = draws(n, n * r * r, cfg.model.t_max, derive_seed(cfg.seed, &[STREAM_PRIMARY, e, st]));
    let (t_leader, eps_leader) = draws(n, n * r * r, cfg.model.t_max, derive_seed(cfg.seed, &[STREAM_LEADER, e, st]));
    Ok(Batch {
        views,
        per_view: indices.len(),
        x_h: images_to_tensor(&hq.iter().collect::<Vec<_>>())?,
        x_l: images_to_tensor(&lq.iter().collect::<Vec<_>>())?,
        mask: masks_to_tensor(&masks.iter().collect::<Vec<_>>())?,
        t,
        eps,
        t_leader,
        eps_leader,
    })
}

/// Noises `{0,1}` masks in the `[-1, 1]` domain, one timestep per element.
pub fn noisy_masks(mask: &Tensor, t: &[usize], eps: &[f64], schedule: &NoiseSchedule) -> Result<Tensor> {
    let b = mask.dim(0);
    let per = mask.numel() / b;
    if t.len() != b || eps.len() != mask.numel() {
        return Err(invalid("noisy_masks: timestep or noise count does not match the batch"));
    }
    let mut out = Vec::with_capacity(mask.numel());
    for (i, &ti) in t.iter().enumerate() {
        schedule.check_t(ti)?;
        let ab = schedule.alpha_bar(ti);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        for j in i * per..(i + 1) * per {
            out.push(a * (2.0 * mask.data()[j] - 1.0) + s * eps[j]);
        }
    }
    Ok(Tensor::from_vec(out, mask.shape())?)
}

/// Structure loss of a model that reads `x` (the leader objective).
pub fn supervised_loss(model: &BoundModel, x: &Tensor, batch: &Batch, schedule: &NoiseSchedule) -> Result<Tensor> {
    let m_t = noisy_masks(&batch.mask, &batch.t, &batch.eps, schedule)?;
    let (_, out) = model.forward(x, &m_t, &batch.t)?;
    structure_loss(&out.logits, &batch.mask)
}

fn narrow_cd(c: &ConditionalDistribution, start: usize, len: usize) -> Result<ConditionalDistribution> {
    Ok(ConditionalDistribution {
        levels: c.levels.iter().map(|l| l.narrow(0, start, len)).collect::<std::result::Result<_, _>>()?,
        source: c.source,
        time_conditioned: c.time_conditioned,
    })
}

fn narrow_hd(d: &HybridDistribution, start: usize, len: usize) -> Result<HybridDistribution> {
    Ok(HybridDistribution {
        layers: d.layers.iter().map(|l| l.narrow(0, start, len)).collect::<std::result::Result<_, _>>()?,
        t: d.t[start..start + len].to_vec(),
    })
}

pub struct FollowerLoss {
    pub total: Tensor,
    pub structure: f64,
    pub rectification: f64,
}

/// Structure loss summed over views plus the rectification terms. The
/// leader's features are detached before they meet the follower's.
pub fn follower_loss(
    follower: &BoundModel,
    leader: Option<&BoundModel>,
    batch: &Batch,
    rect: &RectificationConfig,
    schedule: &NoiseSchedule,
) -> Result<FollowerLoss> {
    let m_t = noisy_masks(&batch.mask, &batch.t, &batch.eps, schedule)?;
    let (c_l, out_l) = follower.forward(&batch.x_l, &m_t, &batch.t)?;
    // per-view means summed over views
    let structure = structure_loss(&out_l.logits, &batch.mask)?.scale(batch.views as f64);
    let structure_value = structure.item()?;
    if !rect.any_enabled() {
        return Ok(FollowerLoss {
            total: structure,
            structure: structure_value,
            rectification: 0.0,
        });
    }
    let leader = leader.ok_or_else(|| invalid("rectification needs a leader"))?;
    let m_t_leader = noisy_masks(&batch.mask, &batch.t_leader, &batch.eps_leader, schedule)?;
    let (c_h, out_h) = leader.forward(&batch.x_h, &m_t_leader, &batch.t_leader)?;
    let (c_h, d_h) = (c_h.detach(), out_h.hybrid.detach());
    let b = batch.per_view;
    let views = (0..batch.views)
        .map(|v| {
            Ok(RectView {
                c_l: narrow_cd(&c_l, v * b, b)?,
                c_h: narrow_cd(&c_h, v * b, b)?,
                d_l: narrow_hd(&out_l.hybrid, v * b, b)?,
                d_h: narrow_hd(&d_h, v * b, b)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rectification = cc_losses(&views[0], views.get(1), rect)?;
    let rect_value = rectification.item()?;
    Ok(FollowerLoss {
        total: structure.add(&rectification)?,
        structure: structure_value,
        rectification: rect_value,
    })
}

struct LogSink {
    path: Option<PathBuf>,
    file: Option<File>,
}

impl LogSink {
    fn open(out: Option<&Path>, append: bool) -> Result<LogSink> {
        let Some(dir) = out else {
            return Ok(LogSink { path: None, file: None });
        };
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(LOG_FILE);
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(io_err(&path))?;
        Ok(LogSink {
            path: Some(path),
            file: Some(file),
        })
    }

    fn write(&mut self, record: &StepRecord) -> Result<()> {
        if let (Some(file), Some(path)) = (self.file.as_mut(), self.path.as_ref()) {
            let line = serde_json::to_string(record)?;
            writeln!(file, "{line}").map_err(io_err(path))?;
        }
        Ok(())
    }
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn open_corpus(cfg: &TrainConfig) -> Result<Corpus> {
    if !cfg.corpus.join(crate::data::MANIFEST).exists() {
        return Err(invalid(format!("corpus {} not found (no manifest)", cfg.corpus.display())));
    }
    let corpus = load_corpus(&cfg.corpus)?;
    let (h, w) = (corpus.manifest.height, corpus.manifest.width);
    if (h, w) != (cfg.model.resolution, cfg.model.resolution) {
        return Err(invalid(format!(
            "corpus is {h}x{w} but the model resolution is {}",
            cfg.model.resolution
        )));
    }
    Ok(corpus)
}

/// Trains the leader on HQ images from scratch.
pub fn train_leader(cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let corpus = open_corpus(cfg)?;
    run(cfg, &corpus, Role::Leader, None, out, None)
}

/// Trains a follower on LQ images at `cfg.scale` against a frozen leader.
pub fn train_follower(cfg: &TrainConfig, leader: &Checkpoint, out: Option<&Path>) -> Result<TrainOutcome> {
    let corpus = open_corpus(cfg)?;
    run(cfg, &corpus, Role::Follower, Some(leader), out, None)
}

/// Continues a run from a checkpoint written by an earlier call.
pub fn resume(cfg: &TrainConfig, from: Checkpoint, leader: Option<&Checkpoint>, out: Option<&Path>) -> Result<TrainOutcome> {
    let corpus = open_corpus(cfg)?;
    run(cfg, &corpus, from.role, leader, out, Some(from))
}

/// Same as [`train_leader`]/[`train_follower`] with an already loaded corpus.
pub fn train_with_corpus(
    cfg: &TrainConfig,
    corpus: &Corpus,
    role: Role,
    leader: Option<&Checkpoint>,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    run(cfg, corpus, role, leader, out, None)
}

fn check_leader(leader: &Checkpoint) -> Result<()> {
    if leader.role != Role::Leader {
        return Err(Error::Checkpoint("the leader checkpoint holds a follower".into()));
    }
    if !leader.model.is_frozen() {
        return Err(Error::Checkpoint("the leader checkpoint is not marked frozen".into()));
    }
    Ok(())
}

fn run(
    cfg: &TrainConfig,
    corpus: &Corpus,
    role: Role,
    leader: Option<&Checkpoint>,
    out: Option<&Path>,
    from: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let schedule = cfg.noise_schedule()?;
    let data = prepare_split(corpus, Split::Train, cfg.scale, cfg.train_limit)?;
    if data.is_empty() {
        return Err(invalid("the training split is empty"));
    }
    let hash = cfg.hash();
    let leader = match role {
        Role::Leader => None,
        Role::Follower => {
            let l = leader.ok_or_else(|| invalid("follower training needs a leader checkpoint"))?;
            check_leader(l)?;
            Some(l)
        }
    };
    let leader_bytes = leader.map(Checkpoint::to_bytes);
    let leader_params = leader.map_or(0, |l| l.model.encoder.len() + l.model.denoiser.len());

    let (mut model, mut opt_enc, mut opt_den, start) = match from {
        Some(ck) => {
            if ck.role != role {
                return Err(Error::Checkpoint(format!("cannot resume a {:?} run from a {:?} checkpoint", role, ck.role)));
            }
            if ck.config_hash != hash {
                return Err(Error::Checkpoint("checkpoint was written under a different config".into()));
            }
            let opt = ck.optimizer.clone().unwrap_or_default();
            let mut enc = AdamW::new(cfg.adamw());
            enc.state = opt.encoder;
            let mut den = AdamW::new(cfg.adamw());
            den.state = opt.denoiser;
            let mut model = ck.model;
            model.set_frozen(false);
            (model, enc, den, ck.epoch)
        }
        None => {
            let kind = match role {
                Role::Leader => EncoderKind::Pyramid,
                Role::Follower => cfg.follower_kind(),
            };
            let model = ConditionalModel::new(cfg.model.clone(), kind, init_seed(cfg.seed, role))?;
            (model, AdamW::new(cfg.adamw()), AdamW::new(cfg.adamw()), 0)
        }
    };
    let views = if role == Role::Follower && cfg.rectification.cc_enabled { 2 } else { 1 };
    let needs_leader = role == Role::Follower && cfg.rectification.any_enabled();

    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        cfg.save(&dir.join(CONFIG_FILE))?;
    }
    let mut sink = LogSink::open(out, start > 0)?;
    let mut log = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut audits = Vec::new();
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);

    for epoch in start..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_PERM, epoch as u64])));
        let mut epoch_sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = make_batch(&data, chunk, views, cfg, epoch, step)?;
            let global = epoch * steps_per_epoch + step;
            let audit = needs_leader && cfg.audit_every > 0 && global % cfg.audit_every == 0;
            let (record, enc_grads, den_grads) = {
                let bound = model.bind(Tracking::Auto);
                let leader_bound =
                    leader.map(|l| l.model.bind(if audit { Tracking::Audit } else { Tracking::Constant }));
                let (total, structure, rectification) = match role {
                    Role::Leader => {
                        let loss = supervised_loss(&bound, &batch.x_h, &batch, &schedule)?;
                        let v = loss.item()?;
                        (loss, v, 0.0)
                    }
                    Role::Follower => {
                        let l = follower_loss(
                            &bound,
                            if needs_leader { leader_bound.as_ref() } else { None },
                            &batch,
                            &cfg.rectification,
                            &schedule,
                        )?;
                        (l.total, l.structure, l.rectification)
                    }
                };
                let loss = total.item()?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        epoch,
                        step,
                        detail: format!("structure {structure}, rectification {rectification}"),
                    });
                }
                let grads = total.backward()?;
                if audit {
                    let lb = leader_bound.as_ref().expect("audit implies a leader");
                    let reached = lb.encoder.reached_by(&grads).len() + lb.denoiser.reached_by(&grads).len();
                    let max_abs = lb
                        .encoder
                        .collect_grads(&grads)
                        .values()
                        .chain(lb.denoiser.collect_grads(&grads).values())
                        .flatten()
                        .fold(0.0f64, |m, g| m.max(g.abs()));
                    audits.push(AuditRecord {
                        epoch,
                        step,
                        leader_params,
                        params_reached: reached,
                        max_abs_grad: max_abs,
                    });
                    if reached > 0 || max_abs != 0.0 {
                        return Err(Error::Frozen(format!(
                            "{reached} leader parameters received gradient (max |g| = {max_abs}) at epoch {epoch}, step {step}"
                        )));
                    }
                }
                let record = StepRecord {
                    epoch,
                    step,
                    loss,
                    structure,
                    rectification,
                };
                (record, bound.encoder.collect_grads(&grads), bound.denoiser.collect_grads(&grads))
            };
            opt_enc.step(&mut model.encoder, &enc_grads)?;
            opt_den.step(&mut model.denoiser, &den_grads)?;
            epoch_sum += record.loss;
            sink.write(&record)?;
            log.push(record);
        }
        let mean = epoch_sum / steps_per_epoch as f64;
        log::info!("{role:?} epoch {}/{}: loss {mean:.6}", epoch + 1, cfg.epochs);
        epoch_losses.push(mean);

        if let (Some(l), Some(before)) = (leader, &leader_bytes) {
            if &l.to_bytes() != before {
                return Err(Error::Frozen(format!("leader serialization changed during epoch {epoch}")));
            }
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                resumable(role, &model, &opt_enc, &opt_den, &hash, epoch + 1, cfg.seed)
                    .save(&dir.join(format!("checkpoint_epoch{:03}.ckpt", epoch + 1)))?;
            }
        }
    }

    let mut checkpoint = resumable(role, &model, &opt_enc, &opt_den, &hash, cfg.epochs, cfg.seed);
    if role == Role::Leader {
        // the exported leader is frozen and carries no optimizer state
        checkpoint.model.set_frozen(true);
        checkpoint.optimizer = None;
    }
    if let Some(dir) = out {
        checkpoint.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        checkpoint,
        log,
        epoch_losses,
        audits,
    })
}

fn resumable(
    role: Role,
    model: &ConditionalModel,
    enc: &AdamW,
    den: &AdamW,
    hash: &str,
    epoch: usize,
    seed: u64,
) -> Checkpoint {
    Checkpoint {
        role,
        model: model.clone(),
        optimizer: Some(OptimizerState {
            encoder: enc.state.clone(),
            denoiser: den.state.clone(),
        }),
        config_hash: hash.to_string(),
        epoch,
        rng_seed: seed,
    }
}

/// Mask-free sampling for a list of images, `batch_size` at a time.
/// Returns probability maps in `[0, 1]`.
pub fn predict(
    model: &ConditionalModel,
    images: &[Rgb],
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<Plane>> {
    let bound = model.bind(Tracking::Constant);
    let r = model.config.resolution;
    let mut out = Vec::with_capacity(images.len());
    for (k, chunk) in images.chunks(batch_size.max(1)).enumerate() {
        let x = images_to_tensor(&chunk.iter().collect::<Vec<_>>())?;
        let b = chunk.len();
        let time_agnostic = matches!(model.encoder_kind, EncoderKind::Pyramid);
        let cached = if time_agnostic { Some(bound.encode(&x, &vec![1; b])?) } else { None };
        let probs = crate::diffusion::sample(
            schedule,
            steps,
            &[b, 1, r, r],
            derive_seed(seed, &[STREAM_SAMPLE, k as u64]),
            |m_t, t| {
                let ts = vec![t; b];
                let c = match &cached {
                    Some(c) => c.clone(),
                    None => bound.encode(&x, &ts)?,
                };
                Ok(bound.denoise(m_t, &ts, &c)?.logits)
            },
        )?;
        for i in 0..b {
            out.push(Plane::new(r, r, probs.data()[i * r * r..(i + 1) * r * r].to_vec())?);
        }
    }
    Ok(out)
}

/// Predicts every sample of `split` from its input at `scale` (1 means HQ)
/// and scores the maps against the ground truth.
pub fn evaluate_model(
    model: &ConditionalModel,
    corpus: &Corpus,
    split: Split,
    scale: usize,
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
    config_hash: &str,
) -> Result<(Vec<Plane>, EvalReport)> {
    let samples = corpus.split(split);
    let images = samples.iter().map(|s| s.input_at(scale)).collect::<Result<Vec<_>>>()?;
    let preds = predict(model, &images, schedule, steps, seed, 20)?;
    let ids: Vec<String> = samples.iter().map(|s| sample_id(s.seed)).collect();
    let pairs: Vec<_> = ids.iter().zip(&preds).zip(&samples).map(|((id, p), s)| (id.clone(), p, &s.mask)).collect();
    let report = evaluate_pairs(&pairs, config_hash, scale)?;
    Ok((preds, report))
}
