//! Output documents, atomic writes, and the cross-run summary table.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metrics::MetricsReport;
use crate::{Error, Result};

/// Writes `bytes` to a sibling temp file, syncs it and renames it over
/// `path`, so a reader never sees a partial file under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serialisable");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Metrics of one arm: per repeat and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub strategy: String,
    pub level: String,
    pub mean: MetricsReport,
    pub repeats: Vec<MetricsReport>,
    /// Clients per assigned pool variant (first repeat), largest first.
    pub assignment_histogram: Vec<usize>,
}

/// `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: String,
    pub target_accuracy: f64,
    pub arms: Vec<ArmSummary>,
}

/// `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_sha256: String,
    pub master_seed: u64,
    pub repeat_seeds: Vec<u64>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub version: String,
}

pub fn version_string() -> String {
    format!("hetfed {}", env!("CARGO_PKG_VERSION"))
}

/// Loads a summary from `summary.json` or from the directory of a
/// `manifest.json`.
pub fn load_summary(path: &Path) -> Result<Summary> {
    let file: PathBuf = if path.is_dir() {
        path.join("summary.json")
    } else if path.file_name().is_some_and(|n| n == "manifest.json") {
        path.with_file_name("summary.json")
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: file.clone(),
        line: e.line() as u64,
        message: e.to_string(),
    })
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub source: String,
    pub scenario: String,
    pub arm: String,
    pub metrics: MetricsReport,
}

/// Flattens summaries and sorts by final accuracy, best first. Ties keep
/// input order.
pub fn collect_rows(summaries: &[(String, Summary)]) -> Vec<ReportRow> {
    let mut rows: Vec<ReportRow> = summaries
        .iter()
        .flat_map(|(src, s)| {
            s.arms.iter().map(move |a| ReportRow {
                source: src.clone(),
                scenario: s.scenario.clone(),
                arm: a.arm.clone(),
                metrics: a.mean.clone(),
            })
        })
        .collect();
    rows.sort_by(|a, b| b.metrics.final_global_accuracy.total_cmp(&a.metrics.final_global_accuracy));
    rows
}

fn fmt_tta(t: Option<f64>) -> String {
    t.map_or_else(|| "not reached".to_string(), |v| format!("{v:.1}"))
}

/// Fixed-width table with a best-per-metric footer.
pub fn render_table(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<28} {:<22} {:>9} {:>14} {:>11} {:>13}",
        "arm", "scenario", "final_acc", "time_to_acc_s", "stability", "effectiveness"
    );
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{:<28} {:<22} {:>9.4} {:>14} {:>11.6} {:>+13.4}",
            r.arm,
            r.scenario,
            m.final_global_accuracy,
            fmt_tta(m.time_to_accuracy_s),
            m.stability_variance,
            m.effectiveness_delta
        );
    }
    if rows.is_empty() {
        return out;
    }
    let best = |key: &dyn Fn(&MetricsReport) -> Option<f64>, higher: bool| {
        rows.iter()
            .filter_map(|r| key(&r.metrics).map(|v| (r, v)))
            .reduce(|a, b| {
                let better = if higher { b.1 > a.1 } else { b.1 < a.1 };
                if better {
                    b
                } else {
                    a
                }
            })
            .map_or_else(|| "-".to_string(), |(r, _)| r.arm.clone())
    };
    let _ = writeln!(out);
    let _ = writeln!(out, "best final accuracy:  {}", best(&|m| Some(m.final_global_accuracy), true));
    let _ = writeln!(out, "best time-to-acc:     {}", best(&|m| m.time_to_accuracy_s, false));
    let _ = writeln!(out, "best stability:       {}", best(&|m| Some(m.stability_variance), false));
    let _ = writeln!(out, "best effectiveness:   {}", best(&|m| Some(m.effectiveness_delta), true));
    out
}

/// Long-format CSV: `source,scenario,arm,metric,value`, rows in table order.
pub fn long_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("source,scenario,arm,metric,value\n");
    for r in rows {
        let m = &r.metrics;
        let tta = m.time_to_accuracy_s.map_or_else(String::new, |v| v.to_string());
        for (name, v) in [
            ("final_global_accuracy", m.final_global_accuracy.to_string()),
            ("time_to_accuracy_s", tta),
            ("stability_variance", m.stability_variance.to_string()),
            ("effectiveness_delta", m.effectiveness_delta.to_string()),
        ] {
            let _ = writeln!(out, "{},{},{},{},{}", r.source, r.scenario, r.arm, name, v);
        }
    }
    out
}
