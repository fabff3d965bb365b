use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, TrainMode};
use super::graphs::thread_pool;
use super::manifest::{DatasetManifest, Split};
use crate::cnn::{CnnModel, InputNorm};
use crate::cotrain::{
    co_train, evaluate, history_csv, infer_all, train_independent, MetricsReport, PairedSample, TrainOutcome,
};
use crate::error::{Error, Result};
use crate::gcn::{GcnModel, PreparedGraph};
use crate::graph::deserialize_graph;
use crate::image::{read_file, read_image, write_file};
use crate::tensor::softmax_rows;

pub const CONFIG_FILE: &str = "config.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const CNN_CHECKPOINT: &str = "cnn.ckpt";
pub const GCN_CHECKPOINT: &str = "gcn.ckpt";
pub const FEATURES_FILE: &str = "features.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Files written into every training run directory.
pub const RUN_FILES: [&str; 6] = [CONFIG_FILE, HISTORY_FILE, METRICS_FILE, CNN_CHECKPOINT, GCN_CHECKPOINT, FEATURES_FILE];

/// Samples loaded into memory, ready for either branch.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub class_names: Vec<String>,
    pub train: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
    /// Ids left out because their graph could not be built.
    pub excluded: Vec<String>,
}

/// Reads every sample that has a graph. Samples without one are listed in
/// `excluded`; a recorded graph that cannot be read is an error.
pub fn load_dataset(root: &Path, manifest: &DatasetManifest, cfg: &RunConfig) -> Result<LoadedDataset> {
    let m = manifest.num_classes();
    if cfg.cnn.num_classes != m || cfg.gcn.num_classes != m {
        return Err(Error::Validation(format!(
            "dataset has {m} classes but the config expects {} (cnn) and {} (gcn)",
            cfg.cnn.num_classes, cfg.gcn.num_classes
        )));
    }
    let mut failures = Vec::new();
    let mut out = LoadedDataset {
        class_names: manifest.class_names.clone(),
        train: Vec::new(),
        test: Vec::new(),
        excluded: Vec::new(),
    };
    for s in &manifest.samples {
        let Some(graph_path) = &s.graph else {
            out.excluded.push(s.id.clone());
            continue;
        };
        let loaded = (|| -> Result<PairedSample> {
            let gp = root.join(graph_path);
            let g = deserialize_graph(&read_file(&gp)?, &gp.display().to_string())?;
            let image = read_image(&root.join(&s.image))?;
            let dims = (image.channels(), image.height(), image.width());
            let want = (cfg.cnn.channels, cfg.cnn.height, cfg.cnn.width);
            if dims != want {
                return Err(Error::Validation(format!(
                    "{}: image is {}x{}x{} (CxHxW) but the CNN expects {}x{}x{}",
                    s.image, dims.0, dims.1, dims.2, want.0, want.1, want.2
                )));
            }
            Ok(PairedSample {
                id: s.id.clone(),
                image: Arc::new(image.to_tensor()),
                graph: PreparedGraph::new(&g)?,
                label: s.label,
            })
        })();
        match (loaded, s.split) {
            (Ok(p), Split::Train) => out.train.push(p),
            (Ok(p), Split::Test) => out.test.push(p),
            (Err(e), _) => failures.push(e.to_string()),
        }
    }
    if !failures.is_empty() {
        return Err(Error::InvalidInputs(failures));
    }
    if out.train.is_empty() && out.test.is_empty() {
        return Err(Error::Validation("no sample has a graph; run build-graphs first".into()));
    }
    if out.train.is_empty() || out.test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

/// Moves a seeded share of each class into a validation set, keeping at
/// least one training sample per class.
pub fn stratified_split(samples: &[PairedSample], fraction: f64, seed: u64) -> (Vec<PairedSample>, Vec<PairedSample>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    let mut is_val = vec![false; samples.len()];
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        let n_val = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len().saturating_sub(1));
        for &i in &idx[..n_val.min(idx.len().saturating_sub(1))] {
            is_val[i] = true;
        }
    }
    let (val, train): (Vec<_>, Vec<_>) = samples.iter().cloned().zip(is_val).partition(|(_, v)| *v);
    (train.into_iter().map(|p| p.0).collect(), val.into_iter().map(|p| p.0).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Contents of `metrics.json`: test-set metrics per branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMetrics {
    pub mode: TrainMode,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub sizes: SplitSizes,
    pub excluded: Vec<String>,
    pub cnn: MetricsReport,
    pub gcn: MetricsReport,
}

impl RunMetrics {
    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_slice(&read_file(path)?).map_err(|e| {
            Error::parse(path.display().to_string(), format!("line {} column {}", e.line(), e.column()), e.to_string())
        })
    }
}

fn fmt_row(out: &mut String, values: impl IntoIterator<Item = f64>) {
    for v in values {
        let _ = write!(out, ",{v}");
    }
}

/// One row per sample: predictions, class probabilities and the embedding of
/// each branch.
pub fn features_csv(
    cnn: &CnnModel,
    gcn: &GcnModel,
    parts: &[(&str, &[PairedSample])],
    m: usize,
) -> Result<String> {
    let mut out = String::new();
    let mut header_done = false;
    for (split, samples) in parts {
        if samples.is_empty() {
            continue;
        }
        let (z1, e1) = infer_all(cnn, samples)?;
        let (z2, e2) = infer_all(gcn, samples)?;
        let (p1, p2) = (softmax_rows(&z1)?, softmax_rows(&z2)?);
        let (y1, y2) = (z1.argmax_rows()?, z2.argmax_rows()?);
        let (d1, d2) = (e1.shape()[1], e2.shape()[1]);
        if !header_done {
            out.push_str("id,split,label,cnn_pred,gcn_pred");
            for (pre, n) in [("cnn_p", m), ("gcn_p", m), ("cnn_e", d1), ("gcn_e", d2)] {
                for i in 0..n {
                    let _ = write!(out, ",{pre}{i}");
                }
            }
            out.push('\n');
            header_done = true;
        }
        for (i, s) in samples.iter().enumerate() {
            let _ = write!(out, "{},{split},{},{},{}", s.id, s.label, y1[i], y2[i]);
            fmt_row(&mut out, p1.data()[i * m..(i + 1) * m].iter().copied());
            fmt_row(&mut out, p2.data()[i * m..(i + 1) * m].iter().copied());
            fmt_row(&mut out, e1.data()[i * d1..(i + 1) * d1].iter().copied());
            fmt_row(&mut out, e2.data()[i * d2..(i + 1) * d2].iter().copied());
            out.push('\n');
        }
    }
    Ok(out)
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("serializable");
    b.push(b'\n');
    b
}

/// Trains both branches with `cfg.seed` and `cfg.mode` and writes the run
/// directory `out` (see [`RUN_FILES`]). A missing `cnn.input_norm` is fitted
/// on the training split and recorded in the echoed config.
pub fn train_run(data: &LoadedDataset, cfg: &RunConfig, out: &Path) -> Result<RunMetrics> {
    cfg.validate()?;
    let m = data.class_names.len();
    let (train, val) = stratified_split(&data.train, cfg.cotrain.val_fraction, cfg.seed);
    let mut cfg = cfg.clone();
    if cfg.cnn.input_norm.is_none() {
        cfg.cnn.input_norm = Some(InputNorm::fit(train.iter().map(|s| &*s.image))?);
    }
    let cnn = CnnModel::new(cfg.cnn.clone(), cfg.seed)?;
    let gcn = GcnModel::new(cfg.gcn.clone(), cfg.seed)?;
    let TrainOutcome { cnn, gcn, state } = match cfg.mode {
        TrainMode::Cotrain => co_train(cnn, gcn, &train, &val, &cfg.cotrain, cfg.seed)?,
        TrainMode::Independent => train_independent(cnn, gcn, &train, &val, &cfg.cotrain, cfg.seed)?,
    };
    let metrics = RunMetrics {
        mode: cfg.mode,
        seed: cfg.seed,
        class_names: data.class_names.clone(),
        sizes: SplitSizes {
            train: train.len(),
            val: val.len(),
            test: data.test.len(),
        },
        excluded: data.excluded.clone(),
        cnn: evaluate(&cnn, &data.test, m)?,
        gcn: evaluate(&gcn, &data.test, m)?,
    };
    let features = features_csv(&cnn, &gcn, &[("train", &train), ("val", &val), ("test", &data.test)], m)?;
    write_file(&out.join(CONFIG_FILE), cfg.to_json_pretty().as_bytes())?;
    write_file(&out.join(HISTORY_FILE), history_csv(&state.history).as_bytes())?;
    write_file(&out.join(METRICS_FILE), &json_bytes(&metrics))?;
    cnn.checkpoint().save(&out.join(CNN_CHECKPOINT))?;
    gcn.checkpoint().save(&out.join(GCN_CHECKPOINT))?;
    write_file(&out.join(FEATURES_FILE), features.as_bytes())?;
    Ok(metrics)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub dir: String,
    pub cnn_accuracy: f64,
    pub gcn_accuracy: f64,
    pub cnn_macro_f1: f64,
    pub gcn_macro_f1: f64,
}

/// Contents of `summary.json` for a multi-seed sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub mode: TrainMode,
    pub runs: Vec<SeedResult>,
    pub cnn_accuracy: MeanStd,
    pub gcn_accuracy: MeanStd,
    pub cnn_macro_f1: MeanStd,
    pub gcn_macro_f1: MeanStd,
}

pub fn seed_dir_name(seed: u64) -> String {
    format!("seed_{seed}")
}

/// Runs seeds `cfg.seed .. cfg.seed + k` on `jobs` threads, one directory per
/// seed under `out`, and writes `summary.json`.
pub fn train_sweep(data: &LoadedDataset, cfg: &RunConfig, k: usize, out: &Path, jobs: usize) -> Result<SweepSummary> {
    if k == 0 {
        return Err(Error::Validation("--seeds must be at least 1".into()));
    }
    cfg.validate()?;
    let seeds: Vec<u64> = (0..k as u64).map(|i| cfg.seed + i).collect();
    let pool = thread_pool(jobs.max(1))?;
    let results: Vec<Result<RunMetrics>> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let run_cfg = RunConfig { seed, ..cfg.clone() };
                train_run(data, &run_cfg, &out.join(seed_dir_name(seed)))
            })
            .collect()
    });
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in seeds.iter().zip(results) {
        match r {
            Ok(m) => runs.push(SeedResult {
                seed: *seed,
                dir: seed_dir_name(*seed),
                cnn_accuracy: m.cnn.accuracy,
                gcn_accuracy: m.gcn.accuracy,
                cnn_macro_f1: m.cnn.macro_f1,
                gcn_macro_f1: m.gcn.macro_f1,
            }),
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Aggregate(failures));
    }
    let col = |f: fn(&SeedResult) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
    let summary = SweepSummary {
        mode: cfg.mode,
        cnn_accuracy: col(|r| r.cnn_accuracy),
        gcn_accuracy: col(|r| r.gcn_accuracy),
        cnn_macro_f1: col(|r| r.cnn_macro_f1),
        gcn_macro_f1: col(|r| r.gcn_macro_f1),
        runs,
    };
    write_file(&out.join(SUMMARY_FILE), &json_bytes(&summary))?;
    Ok(summary)
}
