use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Role};
use super::config::TrainConfig;
use super::trainer::{evaluate_model, train_with_corpus};
use crate::data::{load_corpus, Corpus, Split};
use crate::error::{invalid, io_err, Error, Result};
use crate::metrics::Aggregate;
use crate::models::TceMode;
use crate::rectification::{DistMetric, MetricKind};

pub const TABLE_TEXT: &str = "ablation.txt";
pub const TABLE_JSON: &str = "ablation.json";

/// Follower encoder choice of an ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderChoice {
    /// The leader's pyramid encoder.
    Pyramid,
    Tce(TceMode),
}

/// One row of a toggle matrix. Unset fields keep the base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cdc: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hdc: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cc: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderChoice>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric_cdc: Option<MetricKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric_hdc: Option<MetricKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hdc_layers: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
}

impl AblationRow {
    pub fn named(name: impl Into<String>) -> Self {
        AblationRow {
            name: name.into(),
            ..AblationRow::default()
        }
    }

    /// The base config with this row's overrides, validated.
    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        let r = &mut cfg.rectification;
        if let Some(v) = self.cdc {
            r.cdc_enabled = v;
        }
        if let Some(v) = self.hdc {
            r.hdc_enabled = v;
        }
        if let Some(v) = self.cc {
            r.cc_enabled = v;
        }
        if let Some(m) = self.metric_cdc {
            r.metric_cdc = DistMetric { name: m, ..r.metric_cdc };
        }
        if let Some(m) = self.metric_hdc {
            r.metric_hdc = DistMetric { name: m, ..r.metric_hdc };
        }
        if let Some(l) = &self.hdc_layers {
            r.hdc_layers = l.clone();
        }
        if let Some(e) = self.encoder {
            cfg.tce_mode = match e {
                EncoderChoice::Pyramid => None,
                EncoderChoice::Tce(mode) => Some(mode),
            };
        }
        if let Some(s) = self.scale {
            cfg.scale = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        cfg.validate()
            .map_err(|e| Error::Config(format!("ablation row `{}`: {e}", self.name)))?;
        Ok(cfg)
    }
}

/// A list of rows, stored as TOML `[[rows]]` tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationMatrix {
    #[serde(default)]
    pub rows: Vec<AblationRow>,
}

impl AblationMatrix {
    pub fn from_toml(text: &str) -> Result<AblationMatrix> {
        let m: AblationMatrix = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut names: Vec<&str> = m.rows.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) || names.iter().any(|n| n.is_empty()) {
            return Err(Error::Config("ablation row names must be non-empty and distinct".into()));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<AblationMatrix> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("matrix serializes to TOML")
    }

    /// Baseline, then CDC, HDC, CC and the time-conditioned encoder added
    /// one at a time.
    pub fn progressive() -> Self {
        let row = |name: &str, cdc, hdc, cc, encoder| AblationRow {
            name: name.into(),
            cdc: Some(cdc),
            hdc: Some(hdc),
            cc: Some(cc),
            encoder: Some(encoder),
            ..AblationRow::default()
        };
        let p = EncoderChoice::Pyramid;
        AblationMatrix {
            rows: vec![
                row("baseline", false, false, false, p),
                row("+CDC", true, false, false, p),
                row("+CDC+HDC", true, true, false, p),
                row("+CDC+HDC+CC", true, true, true, p),
                row("+CDC+HDC+CC+TCE", true, true, true, EncoderChoice::Tce(TceMode::EL)),
            ],
        }
    }

    /// The base config at every degradation factor.
    pub fn scales() -> Self {
        AblationMatrix {
            rows: crate::data::SCALES
                .iter()
                .map(|&s| AblationRow {
                    scale: Some(s),
                    ..AblationRow::named(format!("{s}x"))
                })
                .collect(),
        }
    }

    /// CDC alone under each distance.
    pub fn cdc_metrics() -> Self {
        AblationMatrix {
            rows: MetricKind::ALL
                .iter()
                .map(|&m| AblationRow {
                    cdc: Some(true),
                    hdc: Some(false),
                    cc: Some(false),
                    metric_cdc: Some(m),
                    ..AblationRow::named(m.as_str())
                })
                .collect(),
        }
    }

    /// HDC alone on each decoder-layer subset.
    pub fn hdc_layers() -> Self {
        let subsets: [&[usize]; 6] = [&[1], &[2], &[3], &[1, 3], &[1, 2, 3], &[2, 3]];
        AblationMatrix {
            rows: subsets
                .iter()
                .map(|layers| AblationRow {
                    cdc: Some(false),
                    hdc: Some(true),
                    cc: Some(false),
                    hdc_layers: Some(layers.to_vec()),
                    ..AblationRow::named(layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("+"))
                })
                .collect(),
        }
    }
}

/// Outcome of one row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub name: String,
    pub config_hash: String,
    pub scale: usize,
    /// Absent when the row failed.
    pub metrics: Option<Aggregate>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationResult>,
}

impl AblationTable {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn s_alpha(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.name == name)?.metrics.map(|m| m.s_alpha)
    }

    /// Metrics in percent; M is reported ×100 as well.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(4);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  status", "row", "S_a", "E_phi", "F_b^w", "M");
        for r in &self.rows {
            match (&r.metrics, &r.error) {
                (Some(m), _) => {
                    let _ = writeln!(
                        out,
                        "{:<width$}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  ok",
                        r.name,
                        100.0 * m.s_alpha,
                        100.0 * m.e_phi,
                        100.0 * m.f_beta_w,
                        100.0 * m.mae
                    );
                }
                (None, err) => {
                    let msg = err.as_deref().unwrap_or("no metrics");
                    let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  failed: {msg}", r.name, "-", "-", "-", "-");
                }
            }
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let text = dir.join(TABLE_TEXT);
        std::fs::write(&text, self.to_text()).map_err(io_err(&text))?;
        let json = dir.join(TABLE_JSON);
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(io_err(&json))
    }
}

/// Directory name of a row: its name with anything outside `[A-Za-z0-9_-]`
/// replaced, prefixed by the row index to keep names distinct.
pub fn row_dir(index: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{index:02}_{clean}")
}

fn run_row(base: &TrainConfig, row: &AblationRow, corpus: &Corpus, leader: &Checkpoint, dir: Option<&Path>) -> Result<(TrainConfig, Aggregate, f64)> {
    let cfg = row.apply(base)?;
    let outcome = train_with_corpus(&cfg, corpus, Role::Follower, Some(leader), dir)?;
    let schedule = cfg.noise_schedule()?;
    let (_, report) = evaluate_model(
        &outcome.checkpoint.model,
        corpus,
        Split::Test,
        cfg.scale,
        &schedule,
        cfg.sampling_steps,
        cfg.seed,
        &cfg.hash(),
    )?;
    if let Some(d) = dir {
        report.write(d)?;
    }
    let metrics = report.aggregate.ok_or_else(|| invalid("the test split is empty"))?;
    Ok((cfg, metrics, outcome.final_loss().unwrap_or(f64::NAN)))
}

/// Trains and scores a follower per row under the base seed. A failing row
/// is recorded and the remaining rows still run. With `out_dir`, every row
/// keeps its checkpoint, log and report under its own directory and the
/// table is written at the root.
pub fn run_ablation(
    base: &TrainConfig,
    matrix: &AblationMatrix,
    leader: &Checkpoint,
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    let table = AblationTable::default();
    if matrix.rows.is_empty() {
        if let Some(d) = out_dir {
            table.write(d)?;
        }
        return Ok(table);
    }
    let corpus = load_corpus(&base.corpus)?;
    run_ablation_with_corpus(base, matrix, leader, &corpus, out_dir)
}

pub fn run_ablation_with_corpus(
    base: &TrainConfig,
    matrix: &AblationMatrix,
    leader: &Checkpoint,
    corpus: &Corpus,
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for (i, row) in matrix.rows.iter().enumerate() {
        let dir = out_dir.map(|d| d.join(row_dir(i, &row.name)));
        let result = match run_row(base, row, corpus, leader, dir.as_deref()) {
            Ok((cfg, metrics, loss)) => AblationResult {
                name: row.name.clone(),
                config_hash: cfg.hash(),
                scale: cfg.scale,
                metrics: Some(metrics),
                final_loss: Some(loss),
                error: None,
                dir,
            },
            Err(e) => {
                log::warn!("ablation row `{}` failed: {e}", row.name);
                AblationResult {
                    name: row.name.clone(),
                    config_hash: row.apply(base).map(|c| c.hash()).unwrap_or_default(),
                    scale: row.scale.unwrap_or(base.scale),
                    metrics: None,
                    final_loss: None,
                    error: Some(e.to_string()),
                    dir,
                }
            }
        };
        if let Some(m) = &result.metrics {
            log::info!("ablation row `{}`: S_alpha {:.4}", row.name, m.s_alpha);
        }
        table.rows.push(result);
        if let Some(d) = out_dir {
            table.write(d)?;
        }
    }
    Ok(table)
}
