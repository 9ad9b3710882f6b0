//! `camorect`: corpus generation, leader and follower training, sampling,
//! evaluation, ablation sweeps and plots.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod manifest;
mod plot;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use camorect_core::data::{build_corpus, load_corpus, write_gray, Split, MANIFEST};
use camorect_core::diffusion::{make_schedule, ScheduleKind};
use camorect_core::metrics::{evaluate_dataset, prediction_path};
use camorect_core::training::{
    predict, resume, run_ablation, train_follower, train_leader, AblationMatrix, Checkpoint, Role, TrainConfig,
    TrainOutcome, FINAL_CHECKPOINT, TABLE_TEXT,
};
use camorect_core::Error;
use clap::{Args, Parser, Subcommand};

use manifest::{input_hash, now, RunManifest};

pub const CACHE_ENV: &str = "CAMORECT_CACHE";

#[derive(Parser, Debug)]
#[command(name = "camorect", version, about = "Leader-follower diffusion for camouflaged object detection on degraded images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus.
    GenData(GenDataArgs),
    /// Train the leader on high-quality images.
    TrainLeader(TrainLeaderArgs),
    /// Train a follower on degraded images against a frozen leader.
    TrainFollower(TrainFollowerArgs),
    /// Sample prediction maps for a corpus split.
    Sample(SampleArgs),
    /// Score prediction maps against ground truth.
    Evaluate(EvaluateArgs),
    /// Train and score one follower per row of a toggle matrix.
    Ablate(AblateArgs),
    /// Render metric bar charts from reports or ablation tables.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct OutArgs {
    /// Output directory; the run manifest is appended at its root.
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    count: usize,
    /// Height and width.
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [64, 64])]
    size: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct TrainLeaderArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint of the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct TrainFollowerArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    leader_ckpt: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Degradation factor of the inputs; 1 reads the HQ images.
    #[arg(long)]
    scale: usize,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "test")]
    split: String,
    /// `linear` or `cosine`.
    #[arg(long, default_value = "linear")]
    schedule: String,
    #[arg(long, default_value_t = 20)]
    batch_size: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    scale: usize,
    #[arg(long, default_value = "test")]
    split: String,
    /// Recorded in the report.
    #[arg(long, default_value = "")]
    config_hash: String,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// A matrix TOML file or one of `preset:progressive`, `preset:scales`,
    /// `preset:cdc-metrics`, `preset:hdc-layers`.
    #[arg(long)]
    matrix: String,
    /// Frozen leader; trained under `<out>/leader` when absent.
    #[arg(long)]
    leader_ckpt: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Report files, ablation tables, or directories holding either.
    #[arg(long, num_args = 1.., required = true)]
    reports: Vec<PathBuf>,
    /// Series labels, one per report.
    #[arg(long, num_args = 1..)]
    labels: Vec<String>,
    #[command(flatten)]
    out: OutArgs,
}

/// A failed command and its exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn runtime(msg: impl std::fmt::Display) -> Failure {
    Failure::Runtime(msg.to_string())
}

/// What a finished command reports back for its manifest.
struct Done {
    config: serde_json::Value,
    inputs: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
}

/// Set once the command owns its output directory and must leave a manifest.
static CLAIMED: AtomicBool = AtomicBool::new(false);

/// Refuses a non-empty output directory unless `--force` was given.
fn claim_out(out: &OutArgs) -> Result<(), Failure> {
    if out.out.is_file() {
        return Err(usage(format!("--out {} is a file", out.out.display())));
    }
    let occupied = out.out.is_dir()
        && std::fs::read_dir(&out.out)
            .map_err(|e| runtime(format!("{}: {e}", out.out.display())))?
            .next()
            .is_some();
    if occupied && !out.force {
        return Err(usage(format!(
            "output directory {} is not empty; pass --force to write into it",
            out.out.display()
        )));
    }
    std::fs::create_dir_all(&out.out).map_err(|e| runtime(format!("{}: {e}", out.out.display())))?;
    CLAIMED.store(true, Ordering::SeqCst);
    Ok(())
}

fn require_exists(path: &Path, flag: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{flag} {} does not exist", path.display())))
    }
}

fn parse_split(name: &str) -> Result<Split, Failure> {
    Split::parse(name).map_err(Failure::from)
}

/// Loads a run config; a relative corpus path is taken relative to the
/// config file.
fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig, Failure> {
    require_exists(path, "--config")?;
    let mut cfg = TrainConfig::load(path)?;
    if cfg.corpus.is_relative() {
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.corpus = base.join(&cfg.corpus);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_leader(path: Option<&PathBuf>) -> Result<Checkpoint, Failure> {
    let path = path.ok_or_else(|| usage("--leader-ckpt is required"))?;
    require_exists(path, "--leader-ckpt")?;
    let ck = Checkpoint::load(path)?;
    if ck.role != Role::Leader || !ck.model.is_frozen() {
        return Err(usage(format!("{} is not a frozen leader checkpoint", path.display())));
    }
    Ok(ck)
}

fn copy_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(to)?;
    for entry in std::fs::read_dir(from)? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir(&entry.path(), &target)?;
        } else {
            std::fs::copy(entry.path(), target)?;
        }
    }
    Ok(())
}

fn gen_data(a: &GenDataArgs) -> Result<Done, Failure> {
    let size = (a.size[0], a.size[1]);
    // validate before touching the output directory
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    camorect_core::data::gen_sample(a.seed, size).map_err(Failure::from)?;
    claim_out(&a.out)?;
    let cache = std::env::var_os(CACHE_ENV).map(PathBuf::from);
    let manifest = match &cache {
        Some(root) => {
            let key = root.join(format!("corpus-n{}-{}x{}-s{}", a.count, size.0, size.1, a.seed));
            if load_corpus(&key).is_err() {
                log::info!("building corpus into cache {}", key.display());
                let _ = std::fs::remove_dir_all(&key);
                build_corpus(a.count, size, a.seed, &key)?;
            } else {
                log::info!("corpus cache hit {}", key.display());
            }
            copy_dir(&key, &a.out.out).map_err(|e| runtime(format!("copying {}: {e}", key.display())))?;
            camorect_core::data::read_manifest(&a.out.out)?
        }
        None => build_corpus(a.count, size, a.seed, &a.out.out)?,
    };
    let path = a.out.out.join(MANIFEST);
    println!("{}", path.display());
    Ok(Done {
        config: serde_json::json!({
            "count": a.count,
            "size": [size.0, size.1],
            "seed": a.seed,
            "cache": cache,
            "digest": manifest.digest(),
        }),
        inputs: vec![],
        artifacts: vec![path],
    })
}

fn report_training(outcome: &TrainOutcome, out: &Path) -> Vec<PathBuf> {
    let ckpt = out.join(FINAL_CHECKPOINT);
    println!("checkpoint: {}", ckpt.display());
    match outcome.final_loss() {
        Some(l) => println!("final epoch loss: {l:.6}"),
        None => println!("final epoch loss: none (no epochs left to run)"),
    }
    vec![ckpt, out.join(camorect_core::training::LOG_FILE), out.join(camorect_core::training::CONFIG_FILE)]
}

fn cfg_json(cfg: &TrainConfig) -> serde_json::Value {
    let mut v = serde_json::to_value(cfg).unwrap_or_default();
    if let Some(obj) = v.as_object_mut() {
        obj.insert("hash".into(), cfg.hash().into());
    }
    v
}

fn train_leader_cmd(a: &TrainLeaderArgs) -> Result<Done, Failure> {
    let cfg = load_config(&a.config, a.seed)?;
    cfg.validate()?;
    let from = match &a.resume {
        Some(p) => {
            require_exists(p, "--resume")?;
            Some(Checkpoint::load(p)?)
        }
        None => None,
    };
    require_exists(&cfg.corpus, "corpus")?;
    claim_out(&a.out)?;
    let outcome = match from {
        Some(ck) => resume(&cfg, ck, None, Some(&a.out.out))?,
        None => train_leader(&cfg, Some(&a.out.out))?,
    };
    let mut inputs = vec![a.config.clone(), cfg.corpus.clone()];
    inputs.extend(a.resume.clone());
    Ok(Done {
        config: cfg_json(&cfg),
        inputs,
        artifacts: report_training(&outcome, &a.out.out),
    })
}

fn train_follower_cmd(a: &TrainFollowerArgs) -> Result<Done, Failure> {
    let cfg = load_config(&a.config, a.seed)?;
    cfg.validate()?;
    let leader = load_leader(a.leader_ckpt.as_ref())?;
    let from = match &a.resume {
        Some(p) => {
            require_exists(p, "--resume")?;
            Some(Checkpoint::load(p)?)
        }
        None => None,
    };
    require_exists(&cfg.corpus, "corpus")?;
    claim_out(&a.out)?;
    let outcome = match from {
        Some(ck) => resume(&cfg, ck, Some(&leader), Some(&a.out.out))?,
        None => train_follower(&cfg, &leader, Some(&a.out.out))?,
    };
    let mut inputs = vec![a.config.clone(), cfg.corpus.clone()];
    inputs.extend(a.leader_ckpt.clone());
    inputs.extend(a.resume.clone());
    Ok(Done {
        config: cfg_json(&cfg),
        inputs,
        artifacts: report_training(&outcome, &a.out.out),
    })
}

fn sample_cmd(a: &SampleArgs) -> Result<Done, Failure> {
    require_exists(&a.ckpt, "--ckpt")?;
    require_exists(&a.corpus, "--corpus")?;
    let split = parse_split(&a.split)?;
    let ck = Checkpoint::load(&a.ckpt)?;
    let t_max = ck.model.config.t_max;
    if a.steps == 0 || a.steps > t_max {
        return Err(usage(format!("--steps must lie in [1, {t_max}], got {}", a.steps)));
    }
    if a.batch_size == 0 {
        return Err(usage("--batch-size must be positive"));
    }
    let schedule = make_schedule(t_max, ScheduleKind::parse(&a.schedule, t_max)?)?;
    let corpus = load_corpus(&a.corpus)?;
    if a.scale != 1 && !corpus.manifest.scales.contains(&a.scale) {
        return Err(usage(format!(
            "--scale {} is not in the corpus (available: 1 and {:?})",
            a.scale, corpus.manifest.scales
        )));
    }
    let r = ck.model.config.resolution;
    if (corpus.manifest.height, corpus.manifest.width) != (r, r) {
        return Err(usage(format!(
            "corpus is {}x{} but the checkpoint expects {r}x{r}",
            corpus.manifest.height, corpus.manifest.width
        )));
    }
    claim_out(&a.out)?;
    let samples = corpus.split(split);
    let images = samples.iter().map(|s| s.input_at(a.scale)).collect::<Result<Vec<_>, _>>()?;
    let preds = predict(&ck.model, &images, &schedule, a.steps, a.seed, a.batch_size)?;
    let mut artifacts = Vec::new();
    for (s, p) in samples.iter().zip(&preds) {
        let path = prediction_path(&a.out.out, s.seed);
        write_gray(&path, p)?;
        artifacts.push(path);
    }
    println!("{} predictions written to {}", preds.len(), a.out.out.display());
    Ok(Done {
        config: serde_json::json!({
            "scale": a.scale,
            "steps": a.steps,
            "seed": a.seed,
            "split": a.split,
            "schedule": a.schedule,
            "batch_size": a.batch_size,
            "checkpoint_config_hash": ck.config_hash,
        }),
        inputs: vec![a.ckpt.clone(), a.corpus.clone()],
        artifacts,
    })
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<Done, Failure> {
    require_exists(&a.pred, "--pred")?;
    require_exists(&a.corpus, "--corpus")?;
    let split = parse_split(&a.split)?;
    let corpus = load_corpus(&a.corpus)?;
    claim_out(&a.out)?;
    let report = evaluate_dataset(&a.pred, &corpus, split, a.scale, &a.config_hash)?;
    report.write(&a.out.out)?;
    print!("{}", report.to_text());
    if report.warning {
        log::warn!("{} samples had no prediction", report.missing.len());
    }
    Ok(Done {
        config: serde_json::json!({ "scale": a.scale, "split": a.split, "config_hash": a.config_hash }),
        inputs: vec![a.pred.clone(), a.corpus.clone()],
        artifacts: vec![
            a.out.out.join(camorect_core::metrics::REPORT_JSON),
            a.out.out.join(camorect_core::metrics::REPORT_TEXT),
        ],
    })
}

fn load_matrix(spec: &str) -> Result<AblationMatrix, Failure> {
    match spec.strip_prefix("preset:") {
        Some("progressive") => Ok(AblationMatrix::progressive()),
        Some("scales") => Ok(AblationMatrix::scales()),
        Some("cdc-metrics") => Ok(AblationMatrix::cdc_metrics()),
        Some("hdc-layers") => Ok(AblationMatrix::hdc_layers()),
        Some(other) => Err(usage(format!("unknown matrix preset `{other}`"))),
        None => {
            let path = Path::new(spec);
            require_exists(path, "--matrix")?;
            Ok(AblationMatrix::load(path)?)
        }
    }
}

fn ablate_cmd(a: &AblateArgs) -> Result<Done, Failure> {
    let cfg = load_config(&a.config, a.seed)?;
    cfg.validate()?;
    let matrix = load_matrix(&a.matrix)?;
    for row in &matrix.rows {
        row.apply(&cfg)?;
    }
    let leader = match &a.leader_ckpt {
        Some(p) => Some(load_leader(Some(p))?),
        None => None,
    };
    claim_out(&a.out)?;
    let leader = match leader {
        Some(l) => l,
        None if matrix.rows.is_empty() => Checkpoint {
            role: Role::Leader,
            model: camorect_core::models::ConditionalModel::new(
                cfg.model.clone(),
                camorect_core::models::EncoderKind::Pyramid,
                0,
            )?,
            optimizer: None,
            config_hash: cfg.hash(),
            epoch: 0,
            rng_seed: cfg.seed,
        },
        None => {
            let dir = a.out.out.join("leader");
            log::info!("training a leader under {}", dir.display());
            train_leader(&cfg, Some(&dir))?.checkpoint
        }
    };
    let table = run_ablation(&cfg, &matrix, &leader, Some(&a.out.out))?;
    print!("{}", table.to_text());
    if table.failures() > 0 {
        log::warn!("{} of {} rows failed", table.failures(), table.rows.len());
    }
    let mut inputs = vec![a.config.clone()];
    if !a.matrix.starts_with("preset:") {
        inputs.push(PathBuf::from(&a.matrix));
    }
    inputs.extend(a.leader_ckpt.clone());
    let mut artifacts = vec![
        a.out.out.join(TABLE_TEXT),
        a.out.out.join(camorect_core::training::TABLE_JSON),
    ];
    artifacts.extend(table.rows.iter().filter_map(|r| r.dir.clone()));
    Ok(Done {
        config: serde_json::json!({ "base": cfg_json(&cfg), "matrix": matrix }),
        inputs,
        artifacts,
    })
}

fn plot_cmd(a: &PlotArgs) -> Result<Done, Failure> {
    if !a.labels.is_empty() && a.labels.len() != a.reports.len() {
        return Err(usage(format!("{} labels for {} reports", a.labels.len(), a.reports.len())));
    }
    let mut series = Vec::new();
    for (i, path) in a.reports.iter().enumerate() {
        require_exists(path, "--reports")?;
        let mut s = plot::load_series(path).map_err(usage)?;
        if let (Some(label), [single]) = (a.labels.get(i), s.as_mut_slice()) {
            single.label = label.clone();
        }
        series.extend(s);
    }
    if series.is_empty() {
        return Err(usage("no metrics found in the given reports"));
    }
    claim_out(&a.out)?;
    let artifacts = plot::plot_metrics(&series, &a.out.out).map_err(runtime)?;
    for p in &artifacts {
        println!("{}", p.display());
    }
    Ok(Done {
        config: serde_json::json!({ "labels": series.iter().map(|s| s.label.clone()).collect::<Vec<_>>() }),
        inputs: a.reports.clone(),
        artifacts,
    })
}

fn out_of(cmd: &Command) -> &OutArgs {
    match cmd {
        Command::GenData(a) => &a.out,
        Command::TrainLeader(a) => &a.out,
        Command::TrainFollower(a) => &a.out,
        Command::Sample(a) => &a.out,
        Command::Evaluate(a) => &a.out,
        Command::Ablate(a) => &a.out,
        Command::Plot(a) => &a.out,
    }
}

fn name_of(cmd: &Command) -> &'static str {
    match cmd {
        Command::GenData(_) => "gen-data",
        Command::TrainLeader(_) => "train-leader",
        Command::TrainFollower(_) => "train-follower",
        Command::Sample(_) => "sample",
        Command::Evaluate(_) => "evaluate",
        Command::Ablate(_) => "ablate",
        Command::Plot(_) => "plot",
    }
}

fn dispatch(cmd: &Command) -> Result<Done, Failure> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::TrainLeader(a) => train_leader_cmd(a),
        Command::TrainFollower(a) => train_follower_cmd(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Plot(a) => plot_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let out = out_of(&cli.command);
    let started = now();
    let result = dispatch(&cli.command);
    let (code, done, error) = match result {
        Ok(done) => (0u8, Some(done), None),
        Err(f) => {
            eprintln!("error: {}", f.message());
            (f.code(), None, Some(f.message().to_string()))
        }
    };
    // usage errors caught before the output directory was claimed leave no trace
    if CLAIMED.load(Ordering::SeqCst) {
        let (config, inputs, artifacts) = match done {
            Some(d) => (d.config, d.inputs, d.artifacts),
            None => (serde_json::Value::Null, Vec::new(), Vec::new()),
        };
        let inputs: BTreeMap<String, String> = inputs
            .iter()
            .filter_map(|p| input_hash(p).map(|h| (p.display().to_string(), h)))
            .collect();
        let record = RunManifest {
            command: name_of(&cli.command).to_string(),
            config,
            inputs,
            started,
            finished: now(),
            artifacts,
            exit_code: code as i32,
            error,
        };
        if let Err(e) = record.append(&out.out) {
            eprintln!("error: writing the run manifest: {e}");
            return ExitCode::from(1);
        }
    }
    ExitCode::from(code)
}
