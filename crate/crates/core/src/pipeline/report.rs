use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::TrainMode;
use super::train::{RunMetrics, METRICS_FILE, SUMMARY_FILE};
use crate::error::{Error, Result};
use crate::image::write_file;

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchScores {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub f1: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub cnn_accuracy: f64,
    pub cnn_macro_f1: f64,
    pub gcn_accuracy: f64,
    pub gcn_macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub mode: TrainMode,
    pub seed: u64,
    pub cnn: BranchScores,
    pub gcn: BranchScores,
    /// Co-trained minus independent, on the co-trained row of a same-seed pair.
    pub delta: Option<Delta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeMeans {
    pub runs: usize,
    pub cnn_accuracy: f64,
    pub cnn_macro_f1: f64,
    pub gcn_accuracy: f64,
    pub gcn_macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub class_names: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub means: BTreeMap<String, ModeMeans>,
    /// Difference of the per-mode means when both modes are present.
    pub mean_delta: Option<Delta>,
}

fn scores(m: &crate::cotrain::MetricsReport) -> BranchScores {
    BranchScores {
        accuracy: m.accuracy,
        macro_f1: m.macro_f1,
        f1: m.f1.clone(),
    }
}

/// Metrics files under `dir`: its own `metrics.json`, or those of the seed
/// directories listed in a sweep's `summary.json`.
fn metrics_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let own = dir.join(METRICS_FILE);
    if own.is_file() {
        return Ok(vec![own]);
    }
    if dir.join(SUMMARY_FILE).is_file() {
        let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path().join(METRICS_FILE)))
            .filter(|p| p.is_file())
            .collect();
        found.sort();
        if !found.is_empty() {
            return Ok(found);
        }
    }
    Err(Error::MissingFile(own))
}

fn delta(co: &ReportRow, ind: &ReportRow) -> Delta {
    Delta {
        cnn_accuracy: co.cnn.accuracy - ind.cnn.accuracy,
        cnn_macro_f1: co.cnn.macro_f1 - ind.cnn.macro_f1,
        gcn_accuracy: co.gcn.accuracy - ind.gcn.accuracy,
        gcn_macro_f1: co.gcn.macro_f1 - ind.gcn.macro_f1,
    }
}

/// Collects the runs in `dirs` into one table.
pub fn build_report(dirs: &[PathBuf]) -> Result<Report> {
    if dirs.is_empty() {
        return Err(Error::Validation("report needs at least one run directory".into()));
    }
    let mut rows = Vec::new();
    let mut class_names: Option<(Vec<String>, PathBuf)> = None;
    for dir in dirs {
        for path in metrics_files(dir)? {
            let m = RunMetrics::load(&path)?;
            match &class_names {
                None => class_names = Some((m.class_names.clone(), path.clone())),
                Some((names, first)) if names.len() != m.class_names.len() => {
                    return Err(Error::Validation(format!(
                        "{} has {} classes but {} has {}",
                        path.display(),
                        m.class_names.len(),
                        first.display(),
                        names.len()
                    )));
                }
                _ => {}
            }
            rows.push(ReportRow {
                run: path.parent().unwrap_or(dir).display().to_string(),
                mode: m.mode,
                seed: m.seed,
                cnn: scores(&m.cnn),
                gcn: scores(&m.gcn),
                delta: None,
            });
        }
    }
    let mut by_seed: BTreeMap<(u64, TrainMode), Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        by_seed.entry((r.seed, r.mode)).or_default().push(i);
    }
    for ((seed, mode), co) in &by_seed {
        if *mode != TrainMode::Cotrain || co.len() != 1 {
            continue;
        }
        if let Some(ind) = by_seed.get(&(*seed, TrainMode::Independent)).filter(|v| v.len() == 1) {
            rows[co[0]].delta = Some(delta(&rows[co[0]], &rows[ind[0]]));
        }
    }
    let mut means = BTreeMap::new();
    for mode in [TrainMode::Cotrain, TrainMode::Independent] {
        let sel: Vec<&ReportRow> = rows.iter().filter(|r| r.mode == mode).collect();
        if sel.is_empty() {
            continue;
        }
        let n = sel.len() as f64;
        let avg = |f: fn(&ReportRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / n;
        means.insert(
            mode.to_string(),
            ModeMeans {
                runs: sel.len(),
                cnn_accuracy: avg(|r| r.cnn.accuracy),
                cnn_macro_f1: avg(|r| r.cnn.macro_f1),
                gcn_accuracy: avg(|r| r.gcn.accuracy),
                gcn_macro_f1: avg(|r| r.gcn.macro_f1),
            },
        );
    }
    let mean_delta = match (means.get("cotrain"), means.get("independent")) {
        (Some(c), Some(i)) => Some(Delta {
            cnn_accuracy: c.cnn_accuracy - i.cnn_accuracy,
            cnn_macro_f1: c.cnn_macro_f1 - i.cnn_macro_f1,
            gcn_accuracy: c.gcn_accuracy - i.gcn_accuracy,
            gcn_macro_f1: c.gcn_macro_f1 - i.gcn_macro_f1,
        }),
        _ => None,
    };
    Ok(Report {
        class_names: class_names.map(|c| c.0).unwrap_or_default(),
        rows,
        means,
        mean_delta,
    })
}

pub fn report_csv(r: &Report) -> String {
    let mut out = String::from("run,mode,seed");
    for b in ["cnn", "gcn"] {
        let _ = write!(out, ",{b}_accuracy,{b}_macro_f1");
        for name in &r.class_names {
            let _ = write!(out, ",{b}_f1_{name}");
        }
    }
    out.push_str(",delta_cnn_accuracy,delta_cnn_macro_f1,delta_gcn_accuracy,delta_gcn_macro_f1\n");
    for row in &r.rows {
        let _ = write!(out, "{},{},{}", row.run, row.mode, row.seed);
        for b in [&row.cnn, &row.gcn] {
            let _ = write!(out, ",{},{}", b.accuracy, b.macro_f1);
            for f in &b.f1 {
                let _ = write!(out, ",{f}");
            }
        }
        match row.delta {
            Some(d) => {
                let _ = write!(out, ",{},{},{},{}", d.cnn_accuracy, d.cnn_macro_f1, d.gcn_accuracy, d.gcn_macro_f1);
            }
            None => out.push_str(",,,,"),
        }
        out.push('\n');
    }
    out
}

/// Writes `report.csv` and `report.json` into `out`.
pub fn write_report(dirs: &[PathBuf], out: &Path) -> Result<Report> {
    let r = build_report(dirs)?;
    write_file(&out.join(REPORT_CSV), report_csv(&r).as_bytes())?;
    let mut json = serde_json::to_vec_pretty(&r).expect("report serializes");
    json.push(b'\n');
    write_file(&out.join(REPORT_JSON), &json)?;
    Ok(r)
}
