use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use camorect_core::metrics::{Aggregate, EvalReport, REPORT_JSON};
use camorect_core::training::{AblationTable, TABLE_JSON};

/// A named set of aggregate metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub metrics: Aggregate,
}

pub const METRICS: [(&str, &str); 4] = [
    ("s_alpha", "S-alpha (higher is better)"),
    ("e_phi", "mean E-phi (higher is better)"),
    ("f_beta_w", "weighted F-beta (higher is better)"),
    ("mae", "MAE (lower is better)"),
];

fn pick(m: &Aggregate, key: &str) -> f64 {
    match key {
        "s_alpha" => m.s_alpha,
        "e_phi" => m.e_phi,
        "f_beta_w" => m.f_beta_w,
        _ => m.mae,
    }
}

/// Reads series from an evaluation report or an ablation table, given as a
/// file or as the directory holding it. A table yields one series per
/// successful row.
pub fn load_series(path: &Path) -> Result<Vec<Series>, String> {
    let file = if path.is_dir() {
        [REPORT_JSON, TABLE_JSON]
            .iter()
            .map(|f| path.join(f))
            .find(|p| p.exists())
            .ok_or_else(|| format!("{}: no {REPORT_JSON} or {TABLE_JSON}", path.display()))?
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&file).map_err(|e| format!("{}: {e}", file.display()))?;
    if let Ok(table) = serde_json::from_str::<AblationTable>(&text) {
        return Ok(table
            .rows
            .into_iter()
            .filter_map(|r| r.metrics.map(|m| Series { label: r.name, metrics: m }))
            .collect());
    }
    let report: EvalReport = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", file.display()))?;
    let metrics = report
        .aggregate
        .ok_or_else(|| format!("{}: report has no aggregate", file.display()))?;
    Ok(vec![Series {
        label: default_label(path),
        metrics,
    }])
}

fn default_label(path: &Path) -> String {
    let p = if path.file_name().is_some_and(|n| n == REPORT_JSON) {
        path.parent().unwrap_or(path)
    } else {
        path
    };
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const PALETTE: [&str; 8] = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f"];

/// Vertical bar chart, one bar per series, values in `[0, 1]`.
pub fn bar_chart(title: &str, labels: &[String], values: &[f64]) -> String {
    let (w, h, left, bottom, top) = (120.0 + 90.0 * labels.len() as f64, 360.0, 60.0, 80.0, 40.0);
    let plot_h = h - bottom - top;
    let y_max = values.iter().copied().fold(1.0f64, f64::max);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, escape(title));
    for k in 0..=5 {
        let v = y_max * k as f64 / 5.0;
        let y = top + plot_h * (1.0 - v / y_max);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/>"##, w - 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, left - 6.0, y + 4.0);
    }
    for (i, (label, v)) in labels.iter().zip(values).enumerate() {
        let x = left + 20.0 + 90.0 * i as f64;
        let bar = plot_h * (v / y_max).clamp(0.0, 1.0);
        let _ = writeln!(
            s,
            r#"<rect class="bar" x="{x:.1}" y="{:.1}" width="60" height="{bar:.1}" fill="{}"><title>{}: {v:.4}</title></rect>"#,
            top + plot_h - bar,
            PALETTE[i % PALETTE.len()],
            escape(label)
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.3}</text>"#, x + 30.0, top + plot_h - bar - 4.0);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" transform="rotate(-30 {:.1} {:.1})">{}</text>"#,
            x + 30.0,
            h - bottom + 16.0,
            x + 30.0,
            h - bottom + 16.0,
            escape(label)
        );
    }
    let _ = writeln!(s, r##"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="#333"/>"##, top + plot_h, w - 20.0, top + plot_h);
    s.push_str("</svg>\n");
    s
}

/// Writes one chart per metric into `out_dir` and returns the paths.
pub fn plot_metrics(series: &[Series], out_dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let labels: Vec<String> = series.iter().map(|s| s.label.clone()).collect();
    let mut written = Vec::new();
    for (key, title) in METRICS {
        let values: Vec<f64> = series.iter().map(|s| pick(&s.metrics, key)).collect();
        let path = out_dir.join(format!("{key}.svg"));
        std::fs::write(&path, bar_chart(title, &labels, &values))?;
        written.push(path);
    }
    Ok(written)
}
