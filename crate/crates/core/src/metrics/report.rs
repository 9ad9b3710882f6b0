use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::measures::{e_measure, mae, s_measure, weighted_f};
use crate::data::{read_gray, sample_id, Corpus, Split};
use crate::error::{invalid, io_err, Result};
use crate::plane::Plane;

pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub s_alpha: f64,
    pub e_phi: f64,
    pub f_beta_w: f64,
    pub mae: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub s_alpha: f64,
    pub e_phi: f64,
    pub f_beta_w: f64,
    pub mae: f64,
}

impl Aggregate {
    pub fn mean_of(rows: &[SampleMetrics]) -> Option<Aggregate> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Some(Aggregate {
            s_alpha: mean(|r| r.s_alpha),
            e_phi: mean(|r| r.e_phi),
            f_beta_w: mean(|r| r.f_beta_w),
            mae: mean(|r| r.mae),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_sample: Vec<SampleMetrics>,
    /// Absent when no prediction could be scored.
    pub aggregate: Option<Aggregate>,
    pub config_hash: String,
    pub scale: usize,
    /// Sample ids that had no prediction file.
    pub missing: Vec<String>,
    pub warning: bool,
}

/// Scores one prediction against its ground truth.
pub fn evaluate_pair(id: &str, pred: &Plane, gt: &Plane) -> Result<SampleMetrics> {
    Ok(SampleMetrics {
        id: id.to_string(),
        s_alpha: s_measure(pred, gt, 0.5)?,
        e_phi: e_measure(pred, gt)?,
        f_beta_w: weighted_f(pred, gt, 1.0)?,
        mae: mae(pred, gt)?,
    })
}

pub fn evaluate_pairs(pairs: &[(String, &Plane, &Plane)], config_hash: &str, scale: usize) -> Result<EvalReport> {
    let per_sample = pairs
        .iter()
        .map(|(id, pred, gt)| evaluate_pair(id, pred, gt))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        aggregate: Aggregate::mean_of(&per_sample),
        per_sample,
        config_hash: config_hash.to_string(),
        scale,
        missing: Vec::new(),
        warning: false,
    })
}

/// Prediction file for a sample inside a prediction directory.
pub fn prediction_path(dir: &Path, seed: u64) -> std::path::PathBuf {
    dir.join(format!("{}.png", sample_id(seed)))
}

/// Scores `<pred_dir>/<sample id>.png` against every mask of `split`.
/// Missing predictions are listed and flagged; the rest are still scored.
pub fn evaluate_dataset(
    pred_dir: &Path,
    corpus: &Corpus,
    split: Split,
    scale: usize,
    config_hash: &str,
) -> Result<EvalReport> {
    if !pred_dir.is_dir() {
        return Err(invalid(format!("prediction directory {} does not exist", pred_dir.display())));
    }
    let mut per_sample = Vec::new();
    let mut missing = Vec::new();
    for sample in corpus.split(split) {
        let path = prediction_path(pred_dir, sample.seed);
        if !path.exists() {
            missing.push(sample_id(sample.seed));
            continue;
        }
        let pred = read_gray(&path)?;
        per_sample.push(evaluate_pair(&sample_id(sample.seed), &pred, &sample.mask)?);
    }
    Ok(EvalReport {
        aggregate: Aggregate::mean_of(&per_sample),
        per_sample,
        config_hash: config_hash.to_string(),
        scale,
        warning: !missing.is_empty(),
        missing,
    })
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config_hash: {}", self.config_hash);
        let _ = writeln!(s, "scale: {}", self.scale);
        let _ = writeln!(s, "samples: {}", self.per_sample.len());
        let _ = writeln!(s, "warning: {}", self.warning);
        if !self.missing.is_empty() {
            let _ = writeln!(s, "missing: {}", self.missing.join(", "));
        }
        match &self.aggregate {
            Some(a) => {
                let _ = writeln!(s, "s_alpha: {:.6}", a.s_alpha);
                let _ = writeln!(s, "e_phi: {:.6}", a.e_phi);
                let _ = writeln!(s, "f_beta_w: {:.6}", a.f_beta_w);
                let _ = writeln!(s, "mae: {:.6}", a.mae);
            }
            None => {
                let _ = writeln!(s, "error: no predictions scored");
            }
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<16} {:>9} {:>9} {:>9} {:>9}", "id", "s_alpha", "e_phi", "f_beta_w", "mae");
        for r in &self.per_sample {
            let _ = writeln!(
                s,
                "{:<16} {:>9.6} {:>9.6} {:>9.6} {:>9.6}",
                r.id, r.s_alpha, r.e_phi, r.f_beta_w, r.mae
            );
        }
        s
    }

    /// Writes the text report and its JSON twin into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let text = dir.join(REPORT_TEXT);
        fs::write(&text, self.to_text()).map_err(io_err(&text))?;
        let json = dir.join(REPORT_JSON);
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(io_err(&json))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<EvalReport> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}
