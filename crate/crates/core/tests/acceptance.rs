//! Acceptance suite. Every criterion prints one PASS/FAIL line; the process
//! exits non-zero when any criterion fails.
//!
//! The desk-scale criteria (4, 6, 7, 8, 10) share one 200-sample corpus at
//! 64×64 and one leader trained on it. Set `CAMORECT_ACCEPTANCE_ONLY=1,2,5`
//! to run a subset.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use camorect_autograd::fd::{central_difference, relative_error};
use camorect_autograd::nn::Tracking;
use camorect_autograd::Tensor;
use camorect_core::data::{build_corpus, load_corpus, Corpus};
use camorect_core::diffusion::{forward_noise, gaussian, kl_gaussian, make_schedule, ScheduleKind};
use camorect_core::metrics::{e_measure, mae, s_measure, weighted_f};
use camorect_core::models::{
    ConditionalDistribution, ConditionalModel, EncoderKind, HybridDistribution, ModelConfig, Source, TceMode,
};
use camorect_core::plane::Plane;
use camorect_core::rectification::{cdc_loss, dist_metric, hdc_loss, DistMetric, MetricKind, RectificationConfig};
use camorect_core::training::{
    follower_loss, read_log, run_ablation_with_corpus, structure_loss, train_with_corpus, AblationMatrix, AblationRow,
    AblationTable, Batch, Checkpoint, EncoderChoice, Role, TrainConfig, FINAL_CHECKPOINT, LOG_FILE,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- desk setup

const DESK_SAMPLES: usize = 200;
const DESK_RESOLUTION: usize = 64;
const DESK_EPOCHS: usize = 100;
/// Epochs per row for the harness criteria, which only check completion.
const HARNESS_EPOCHS: usize = 3;

fn desk_config(corpus: &Path) -> TrainConfig {
    TrainConfig {
        corpus: corpus.to_path_buf(),
        scale: 4,
        lr: 3e-3,
        epochs: DESK_EPOCHS,
        checkpoint_every: 0,
        seed: 0,
        rectification: RectificationConfig {
            weight_cdc: 1.0,
            weight_hdc: 1.0,
            ..RectificationConfig::default()
        },
        tce_mode: Some(TceMode::EL),
        model: ModelConfig {
            resolution: DESK_RESOLUTION,
            cond_channels: 24,
            denoiser_channels: 24,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

struct Desk {
    _dir: tempfile::TempDir,
    corpus: Corpus,
    config: TrainConfig,
    leader: Checkpoint,
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let t = Instant::now();
        let dir = tempfile::tempdir().expect("temp dir");
        let path = dir.path().join("corpus");
        build_corpus(DESK_SAMPLES, (DESK_RESOLUTION, DESK_RESOLUTION), 0, &path).expect("desk corpus");
        let corpus = load_corpus(&path).expect("desk corpus loads");
        let config = desk_config(&path);
        let leader = train_with_corpus(&config, &corpus, Role::Leader, None, None)
            .expect("leader trains")
            .checkpoint;
        println!("      desk corpus and leader ready in {:.0} s", t.elapsed().as_secs_f64());
        Desk {
            _dir: dir,
            corpus,
            config,
            leader,
        }
    })
}

fn row_with(name: &str, cdc: bool, hdc: bool, cc: bool, encoder: EncoderChoice) -> AblationRow {
    AblationRow {
        cdc: Some(cdc),
        hdc: Some(hdc),
        cc: Some(cc),
        encoder: Some(encoder),
        ..AblationRow::named(name)
    }
}

fn full_row(name: &str, scale: usize) -> AblationRow {
    AblationRow {
        scale: Some(scale),
        ..row_with(name, true, true, true, EncoderChoice::Tce(TceMode::EL))
    }
}

fn progressive_table() -> Result<&'static AblationTable, String> {
    static TABLE: OnceLock<Result<AblationTable, String>> = OnceLock::new();
    TABLE
        .get_or_init(|| {
            let d = desk();
            let out = tempfile::tempdir().map_err(err)?;
            let table = run_ablation_with_corpus(&d.config, &AblationMatrix::progressive(), &d.leader, &d.corpus, Some(out.path()))
                .map_err(err)?;
            print!("{}", indent(&table.to_text()));
            Ok(table)
        })
        .as_ref()
        .map_err(Clone::clone)
}

fn indent(text: &str) -> String {
    text.lines().map(|l| format!("      {l}\n")).collect()
}

fn s_alpha(table: &AblationTable, name: &str) -> Result<f64, String> {
    table.s_alpha(name).ok_or_else(|| format!("row {name} has no result"))
}

// ---------------------------------------------------------------- criteria

/// Forward-noise marginals over 1e5 draws against the closed form.
fn diffusion_marginals() -> Outcome {
    const DRAWS: usize = 100_000;
    let schedule = make_schedule(100, ScheduleKind::linear_for(100)).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for case in 0..3 {
        let x0_value: f64 = rng.random_range(-1.0..1.0);
        let t = rng.random_range(1..=100usize);
        let x0 = Tensor::full(&[DRAWS], x0_value);
        let eps = gaussian(&[DRAWS], &mut rng);
        let xt = forward_noise(&x0, t, &eps, &schedule).map_err(err)?.values;
        let n = DRAWS as f64;
        let mean = xt.data().iter().sum::<f64>() / n;
        let std = (xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let ab = schedule.alpha_bar(t);
        let (want_mean, want_std) = (ab.sqrt() * x0_value, (1.0 - ab).sqrt());
        let z_mean = (mean - want_mean).abs() / (want_std / n.sqrt());
        let z_std = (std - want_std).abs() / (want_std / (2.0 * (n - 1.0)).sqrt());
        worst = worst.max(z_mean).max(z_std);
        ensure(z_mean < 3.0 && z_std < 3.0, || {
            format!("case {case} (x0 {x0_value:.3}, t {t}): mean off by {z_mean:.2} SE, std by {z_std:.2} SE")
        })?;
    }
    Ok(format!("3 cases, worst deviation {worst:.2} SE"))
}

/// Closed-form diagonal Gaussian KL against a 1e6-sample Monte-Carlo estimate.
fn gaussian_kl_oracle() -> Outcome {
    const DRAWS: usize = 1_000_000;
    const DIM: usize = 3;
    let mut worst: f64 = 0.0;
    for case in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + case);
        let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..DIM).map(|_| rng.random_range(lo..hi)).collect() };
        let mu1 = draw(-1.0, 1.0);
        let var1: Vec<f64> = draw(-0.7, 0.7).into_iter().map(f64::exp).collect();
        let shift = draw(0.5, 1.5);
        let mu2: Vec<f64> = mu1.iter().zip(&shift).map(|(m, s)| m + s).collect();
        let var2: Vec<f64> = draw(-0.7, 0.7).into_iter().map(f64::exp).collect();
        let tensor = |v: &Vec<f64>| Tensor::from_slice(v, &[DIM]).expect("shape");
        let closed = kl_gaussian(&tensor(&mu1), &tensor(&var1), &tensor(&mu2), &tensor(&var2)).map_err(err)?;

        // E_{x~p1}[log p1(x) − log p2(x)]
        let z = gaussian(&[DRAWS, DIM], &mut rng);
        let mut total = 0.0;
        for draw in z.data().chunks(DIM) {
            for d in 0..DIM {
                let x = mu1[d] + var1[d].sqrt() * draw[d];
                let log1 = -0.5 * ((x - mu1[d]).powi(2) / var1[d] + var1[d].ln());
                let log2 = -0.5 * ((x - mu2[d]).powi(2) / var2[d] + var2[d].ln());
                total += log1 - log2;
            }
        }
        let mc = total / DRAWS as f64;
        let rel = (closed - mc).abs() / closed.abs();
        worst = worst.max(rel);
        ensure(rel < 0.01, || format!("case {case}: closed form {closed:.5}, Monte Carlo {mc:.5}"))?;
    }
    Ok(format!("10 cases, worst relative error {:.3}%", 100.0 * worst))
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).expect("shape")
}

/// Analytic gradient of `f` at `x0` against central differences.
fn fd_check(shape: &[usize], x0: &[f64], f: impl Fn(&Tensor) -> Tensor) -> Result<f64, String> {
    let x = Tensor::variable(x0.to_vec(), shape).map_err(err)?;
    let grads = f(&x).backward().map_err(err)?;
    let analytic = grads.get(&x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x0.len()]);
    let numeric = central_difference(
        |v| f(&Tensor::from_slice(v, shape).expect("shape")).item().expect("scalar"),
        x0,
        1e-6,
    );
    Ok(relative_error(&analytic, &numeric))
}

fn pyramid(seed: u64, source: Source) -> ConditionalDistribution {
    ConditionalDistribution {
        levels: vec![random_tensor(&[2, 3, 4, 4], seed), random_tensor(&[2, 3, 2, 2], seed + 1)],
        source,
        time_conditioned: false,
    }
}

fn hybrid(seed: u64) -> HybridDistribution {
    HybridDistribution {
        layers: vec![
            random_tensor(&[2, 2, 2, 2], seed),
            random_tensor(&[2, 2, 4, 4], seed + 1),
            random_tensor(&[2, 2, 8, 8], seed + 2),
        ],
        t: vec![1, 2],
    }
}

/// Splits a flat vector into tensors of the given shapes.
fn unflat(x: &Tensor, shapes: &[Vec<usize>]) -> Vec<Tensor> {
    let mut offset = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let part = x.narrow(0, offset, n).and_then(|p| p.reshape(s)).expect("shape");
            offset += n;
            part
        })
        .collect()
}

fn flat(tensors: &[Tensor]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Toy configuration with under 1k parameters per model.
fn toy_model_config() -> ModelConfig {
    ModelConfig {
        resolution: 32,
        cond_channels: 1,
        denoiser_channels: 1,
        token_dim: 2,
        tce_layers: 4,
        mlp_ratio: 1,
        time_dim: 2,
        t_max: 10,
    }
}

fn toy_batch(cfg: &ModelConfig) -> Batch {
    let (views, per_view, r) = (2, 1, cfg.resolution);
    let n = views * per_view;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let image = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n * 3 * r * r).map(|_| rng.random_range(0.0..1.0)).collect() };
    let x_h = Tensor::from_vec(image(&mut rng), &[n, 3, r, r]).expect("shape");
    let x_l = Tensor::from_vec(image(&mut rng), &[n, 3, r, r]).expect("shape");
    let mask: Vec<f64> = (0..n * r * r)
        .map(|i| {
            let (y, x) = ((i / r) % r, i % r);
            if (y as f64 - 15.5).powi(2) + (x as f64 - 12.0).powi(2) < 60.0 { 1.0 } else { 0.0 }
        })
        .collect();
    let noise = |rng: &mut ChaCha8Rng| gaussian(&[n * r * r], rng).data().to_vec();
    Batch {
        views,
        per_view,
        x_h,
        x_l,
        mask: Tensor::from_vec(mask, &[n, 1, r, r]).expect("shape"),
        t: vec![3, 7],
        eps: noise(&mut rng),
        t_leader: vec![5, 2],
        eps_leader: noise(&mut rng),
    }
}

/// One follower loss with every rectification term on, differentiated with
/// respect to all follower parameters.
fn follower_step_error() -> Result<(usize, f64), String> {
    let cfg = toy_model_config();
    let mut leader = ConditionalModel::new(cfg.clone(), EncoderKind::Pyramid, 1).map_err(err)?;
    leader.set_frozen(true);
    let follower = ConditionalModel::new(cfg.clone(), EncoderKind::Tce(TceMode::EL), 2).map_err(err)?;
    let params = follower.num_parameters();
    ensure(params <= 1000, || format!("toy follower has {params} parameters"))?;
    let batch = toy_batch(&cfg);
    let schedule = make_schedule(cfg.t_max, ScheduleKind::linear_for(cfg.t_max)).map_err(err)?;
    let rect = RectificationConfig {
        hdc_layers: vec![1, 2, 3],
        ..RectificationConfig::default()
    };
    let bound_leader = leader.bind(Tracking::Auto);

    let bound = follower.bind(Tracking::Auto);
    let loss = follower_loss(&bound, Some(&bound_leader), &batch, &rect, &schedule).map_err(err)?;
    ensure(loss.rectification > 0.0, || "rectification term is zero".into())?;
    let grads = loss.total.backward().map_err(err)?;
    let mut analytic: Vec<f64> = Vec::new();
    for map in [bound.encoder.collect_grads(&grads), bound.denoiser.collect_grads(&grads)] {
        analytic.extend(map.into_values().flatten());
    }

    let n_enc = follower.encoder.num_scalars();
    let mut x0 = follower.encoder.flatten();
    x0.extend(follower.denoiser.flatten());
    let numeric = central_difference(
        |v| {
            let mut m = follower.clone();
            m.encoder.unflatten(&v[..n_enc]).expect("sizes");
            m.denoiser.unflatten(&v[n_enc..]).expect("sizes");
            let b = m.bind(Tracking::Constant);
            follower_loss(&b, Some(&bound_leader), &batch, &rect, &schedule)
                .and_then(|l| Ok(l.total.item()?))
                .expect("loss")
        },
        &x0,
        1e-6,
    );
    Ok((params, relative_error(&analytic, &numeric)))
}

fn gradient_suite() -> Outcome {
    const TOL: f64 = 1e-4;
    let mut errors: BTreeMap<String, f64> = BTreeMap::new();

    let mask: Vec<f64> = (0..128).map(|i| if ((i / 8) % 8 + i % 8 + i / 64) % 3 == 0 { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::from_vec(mask, &[2, 1, 8, 8]).map_err(err)?;
    let logits = random_tensor(&[2, 1, 8, 8], 1).scale(3.0);
    errors.insert(
        "structure_loss".into(),
        fd_check(&[2, 1, 8, 8], logits.data(), |x| structure_loss(x, &mask).expect("loss"))?,
    );

    let q = random_tensor(&[2, 3, 4, 4], 2);
    let p0 = random_tensor(&[2, 3, 4, 4], 3);
    for kind in MetricKind::ALL {
        let metric = DistMetric::new(kind);
        let e = fd_check(&[2, 3, 4, 4], p0.data(), |x| dist_metric(&metric, x, &q).expect("metric"))?;
        errors.insert(format!("dist_metric {}", kind.as_str()), e);
    }

    let leader_c = pyramid(10, Source::Leader);
    let follower_c = pyramid(20, Source::Follower);
    let c_shapes = follower_c.shapes();
    let metric = DistMetric::new(MetricKind::Kl);
    let c_len = flat(&follower_c.levels).len();
    errors.insert(
        "cdc_loss".into(),
        fd_check(&[c_len], &flat(&follower_c.levels), |x| {
            let c = ConditionalDistribution {
                levels: unflat(x, &c_shapes),
                ..follower_c.clone()
            };
            cdc_loss(&c, &leader_c, &metric).expect("cdc")
        })?,
    );

    let leader_d = hybrid(30);
    let follower_d = hybrid(40);
    let d_shapes = follower_d.shapes();
    let d_len = flat(&follower_d.layers).len();
    for kind in [MetricKind::Kl, MetricKind::Mmd] {
        let metric = DistMetric::new(kind);
        let e = fd_check(&[d_len], &flat(&follower_d.layers), |x| {
            let d = HybridDistribution {
                layers: unflat(x, &d_shapes),
                ..follower_d.clone()
            };
            hdc_loss(&d, &leader_d, &[1, 2, 3], &metric).expect("hdc")
        })?;
        errors.insert(format!("hdc_loss {}", kind.as_str()), e);
    }

    let (params, e) = follower_step_error()?;
    errors.insert(format!("follower step ({params} params)"), e);

    let failing: Vec<String> = errors
        .iter()
        .filter(|(_, &e)| !(e < TOL))
        .map(|(k, e)| format!("{k}: {e:.2e}"))
        .collect();
    ensure(failing.is_empty(), || format!("relative error >= {TOL:e}: {}", failing.join(", ")))?;
    let worst = errors.values().copied().fold(0.0, f64::max);
    Ok(format!("{} checks, worst relative error {worst:.2e}", errors.len()))
}

/// A complete desk-scale follower run leaves the leader untouched.
fn frozen_leader() -> Outcome {
    let d = desk();
    let before = d.leader.to_bytes();
    let cfg = TrainConfig {
        epochs: 10,
        audit_every: 3,
        ..d.config.clone()
    };
    let out = tempfile::tempdir().map_err(err)?;
    let outcome = train_with_corpus(&cfg, &d.corpus, Role::Follower, Some(&d.leader), Some(out.path())).map_err(err)?;
    ensure(d.leader.to_bytes() == before, || "in-memory leader changed".into())?;
    ensure(outcome.audits.len() >= 10, || format!("only {} audited steps", outcome.audits.len()))?;
    for a in &outcome.audits {
        ensure(a.params_reached == 0 && a.max_abs_grad == 0.0, || {
            format!(
                "epoch {} step {}: {} leader parameters reached, max |grad| {}",
                a.epoch, a.step, a.params_reached, a.max_abs_grad
            )
        })?;
    }
    Ok(format!(
        "{} epochs, {} audited steps with zero leader gradients, leader serialization unchanged ({} bytes)",
        cfg.epochs,
        outcome.audits.len(),
        before.len()
    ))
}

// seeded 16x16 metric pairs, mirrored by the frozen oracle values
struct SplitMix(u64);

impl SplitMix {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn below(&mut self, n: usize) -> usize {
        (self.unit() * n as f64) as usize
    }
}

fn metric_pair(i: usize) -> (Plane, Plane) {
    const N: usize = 16;
    let mut r = SplitMix(1000 + i as u64);
    let mut gt = Plane::filled(N, N, 0.0);
    match i {
        0 => {}
        1 => gt = Plane::filled(N, N, 1.0),
        2 => {
            let (y, x) = (r.below(N), r.below(N));
            gt.set(y, x, 1.0);
        }
        3 => {
            let cols = 1 + r.below(N - 1);
            gt = Plane::from_fn(N, N, |_, x| if x < cols { 1.0 } else { 0.0 });
        }
        _ if i % 10 < 6 => {
            let (cy, cx) = (r.unit() * N as f64, r.unit() * N as f64);
            let (ry, rx) = (1.5 + r.unit() * 6.0, 1.5 + r.unit() * 6.0);
            gt = Plane::from_fn(N, N, |y, x| {
                let v = (y as f64 - cy).powi(2) / (ry * ry) + (x as f64 - cx).powi(2) / (rx * rx);
                if v < 1.0 { 1.0 } else { 0.0 }
            });
        }
        _ => {
            for _ in 0..2 {
                let (y0, x0) = (r.below(N), r.below(N));
                let (h, w) = (1 + r.below(8), 1 + r.below(8));
                for y in y0..(y0 + h).min(N) {
                    for x in x0..(x0 + w).min(N) {
                        gt.set(y, x, 1.0);
                    }
                }
            }
        }
    }
    let w = r.unit();
    let pred = Plane::from_fn(N, N, |y, x| {
        let g = gt.at(y, x);
        let u = r.unit();
        let v = match i % 7 {
            0 => g,
            1 => 1.0 - g,
            2 => {
                if u < 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
            _ => w * g + (1.0 - w) * u,
        };
        (1000.0 * v + 0.5).floor() / 1000.0
    });
    (pred, gt)
}

#[derive(serde::Deserialize)]
struct FrozenPair {
    case: usize,
    fg: usize,
    pred_sum: f64,
    s_alpha: f64,
    e_phi: f64,
    f_beta_w: f64,
    mae: f64,
}

fn metric_oracle() -> Outcome {
    const TOL: f64 = 1e-6;
    let frozen: Vec<FrozenPair> =
        serde_json::from_str(include_str!("fixtures/metric_pairs.json")).map_err(err)?;
    ensure(frozen.len() == 50, || format!("{} frozen pairs", frozen.len()))?;
    let mut worst: f64 = 0.0;
    let mut degenerate = 0;
    for f in &frozen {
        let (pred, gt) = metric_pair(f.case);
        let fg = gt.data.iter().filter(|&&v| v > 0.5).count();
        let sum: f64 = pred.data.iter().sum();
        ensure(fg == f.fg && (sum - f.pred_sum).abs() < 1e-9, || {
            format!("pair {} does not match its frozen generator values", f.case)
        })?;
        if fg == 0 || fg == gt.len() {
            degenerate += 1;
        }
        let got = [
            s_measure(&pred, &gt, 0.5).map_err(err)?,
            e_measure(&pred, &gt).map_err(err)?,
            weighted_f(&pred, &gt, 1.0).map_err(err)?,
            mae(&pred, &gt).map_err(err)?,
        ];
        let want = [f.s_alpha, f.e_phi, f.f_beta_w, f.mae];
        for (k, name) in ["S_alpha", "E_phi", "F_beta^w", "M"].iter().enumerate() {
            let d = (got[k] - want[k]).abs();
            worst = worst.max(d);
            ensure(d < TOL, || format!("pair {}: {name} {} vs reference {}", f.case, got[k], want[k]))?;
        }
    }
    Ok(format!("50 pairs ({degenerate} with degenerate ground truth), worst difference {worst:.1e}"))
}

fn rectification_trend() -> Outcome {
    let table = progressive_table()?;
    let names = ["baseline", "+CDC", "+CDC+HDC", "+CDC+HDC+CC", "+CDC+HDC+CC+TCE"];
    let s: Vec<f64> = names.iter().map(|n| s_alpha(table, n)).collect::<Result<_, _>>()?;
    let points = |v: f64| 100.0 * v;
    let summary = names
        .iter()
        .zip(&s)
        .map(|(n, v)| format!("{n} {:.2}", points(*v)))
        .collect::<Vec<_>>()
        .join(", ");
    let gain = points(s[4] - s[0]);
    ensure(s[0] < s[1] && s[1] <= s[2] && s[2] <= s[3] && gain >= 2.0, || {
        format!("{summary}; full minus baseline {gain:.2} points")
    })?;
    Ok(format!("{summary}; full minus baseline {gain:.2} points"))
}

fn degradation_ordering() -> Outcome {
    let d = desk();
    let four = s_alpha(progressive_table()?, "+CDC+HDC+CC+TCE")?;
    let matrix = AblationMatrix {
        rows: vec![full_row("2x", 2), full_row("8x", 8)],
    };
    let out = tempfile::tempdir().map_err(err)?;
    let table = run_ablation_with_corpus(&d.config, &matrix, &d.leader, &d.corpus, Some(out.path())).map_err(err)?;
    let (two, eight) = (s_alpha(&table, "2x")?, s_alpha(&table, "8x")?);
    let summary = format!("2x {:.2}, 4x {:.2}, 8x {:.2}", 100.0 * two, 100.0 * four, 100.0 * eight);
    ensure(two > four && four > eight, || summary.clone())?;
    Ok(summary)
}

fn check_harness_table(table: &AblationTable, rows: usize, dir: &Path) -> Result<(), String> {
    ensure(table.rows.len() == rows, || format!("{} rows", table.rows.len()))?;
    for r in &table.rows {
        let m = r.metrics.as_ref().ok_or_else(|| format!("{}: {}", r.name, r.error.clone().unwrap_or_default()))?;
        let finite = [m.s_alpha, m.e_phi, m.f_beta_w, m.mae].iter().all(|v| v.is_finite());
        ensure(finite && r.final_loss.is_some_and(f64::is_finite), || format!("{}: non-finite result", r.name))?;
        let log_dir = r.dir.clone().ok_or_else(|| format!("{}: no output directory", r.name))?;
        for step in read_log(&log_dir.join(LOG_FILE)).map_err(err)? {
            ensure(step.loss.is_finite(), || format!("{}: non-finite loss at epoch {}", r.name, step.epoch))?;
        }
    }
    let text = std::fs::read_to_string(dir.join(camorect_core::training::TABLE_TEXT)).map_err(err)?;
    ensure(text.lines().count() == rows + 1, || format!("table text has {} lines", text.lines().count()))?;
    Ok(())
}

fn short_harness(matrix: AblationMatrix) -> Result<(AblationTable, tempfile::TempDir), String> {
    let d = desk();
    let rows = matrix
        .rows
        .into_iter()
        .map(|r| AblationRow {
            epochs: Some(HARNESS_EPOCHS),
            ..r
        })
        .collect();
    let out = tempfile::tempdir().map_err(err)?;
    let table = run_ablation_with_corpus(&d.config, &AblationMatrix { rows }, &d.leader, &d.corpus, Some(out.path()))
        .map_err(err)?;
    print!("{}", indent(&table.to_text()));
    Ok((table, out))
}

fn loss_metric_harness() -> Outcome {
    let (table, out) = short_harness(AblationMatrix::cdc_metrics())?;
    check_harness_table(&table, 6, out.path())?;
    Ok(format!("6 CDC metrics, {HARNESS_EPOCHS} epochs each, all finite"))
}

fn layer_subset_harness() -> Outcome {
    let (table, out) = short_harness(AblationMatrix::hdc_layers())?;
    check_harness_table(&table, 6, out.path())?;
    Ok(format!("6 HDC layer subsets, {HARNESS_EPOCHS} epochs each, table written"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let corpus_dir = dir.path().join("corpus");
    build_corpus(12, (64, 64), 3, &corpus_dir).map_err(err)?;
    let corpus = load_corpus(&corpus_dir).map_err(err)?;
    let cfg = TrainConfig {
        corpus: corpus_dir,
        batch_size: 4,
        lr: 3e-3,
        epochs: 2,
        checkpoint_every: 1,
        audit_every: 2,
        seed: 5,
        model: ModelConfig {
            cond_channels: 4,
            denoiser_channels: 4,
            token_dim: 8,
            tce_layers: 4,
            t_max: 20,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let leader = train_with_corpus(&cfg, &corpus, Role::Leader, None, None).map_err(err)?.checkpoint;
    let run = |name: &str| -> Result<BTreeMap<String, Vec<u8>>, String> {
        let out = dir.path().join(name);
        train_with_corpus(&cfg, &corpus, Role::Follower, Some(&leader), Some(&out)).map_err(err)?;
        let mut files = BTreeMap::new();
        for entry in std::fs::read_dir(&out).map_err(err)? {
            let path = entry.map_err(err)?.path();
            files.insert(
                path.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&path).map_err(err)?,
            );
        }
        Ok(files)
    };
    let (a, b) = (run("a")?, run("b")?);
    ensure(a.contains_key(LOG_FILE) && a.contains_key(FINAL_CHECKPOINT), || format!("files: {:?}", a.keys()))?;
    ensure(a.keys().eq(b.keys()), || "runs wrote different files".into())?;
    for (name, bytes) in &a {
        ensure(b[name] == *bytes, || format!("{name} differs between runs"))?;
    }
    Ok(format!("{} files bit-identical across two runs", a.len()))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("diffusion marginals", diffusion_marginals),
        ("gaussian KL oracle", gaussian_kl_oracle),
        ("gradient suite", gradient_suite),
        ("frozen leader", frozen_leader),
        ("metric oracle", metric_oracle),
        ("rectification trend", rectification_trend),
        ("degradation ordering", degradation_ordering),
        ("loss-metric harness", loss_metric_harness),
        ("determinism", determinism),
        ("HDC layer-subset harness", layer_subset_harness),
    ];
    // `cargo test` passes harness flags such as `--nocapture`; only a
    // filter of criterion numbers is honoured
    let only: Option<Vec<usize>> = std::env::var("CAMORECT_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    if std::env::args().any(|a| a == "--list") {
        for (i, (name, _)) in criteria.iter().enumerate() {
            println!("criterion_{}_{}: test", i + 1, name.replace(' ', "_"));
        }
        return;
    }
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  criterion {n:>2} {name} ({secs:.1} s): {detail}"),
            Err(detail) => {
                println!("FAIL  criterion {n:>2} {name} ({secs:.1} s): {detail}");
                failed.push(n);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
