use std::fs;
use std::path::{Path, PathBuf};

use actgraph::cnn::CnnConfig;
use actgraph::gcn::GcnConfig;
use actgraph::pipeline::*;

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset.per_class = 6;
    cfg.dataset.image_size = 32;
    cfg.cnn = CnnConfig {
        height: 32,
        width: 32,
        ..CnnConfig::default()
    };
    cfg.gcn = GcnConfig {
        depth: 3,
        hidden_dim: 8,
        ..GcnConfig::default()
    };
    cfg.edge.alpha = 0.25;
    cfg.edge.beta = 0.1;
    cfg.cotrain.epochs = 2;
    cfg.cotrain.batch_size = 4;
    cfg
}

fn prepared(dir: &Path, cfg: &RunConfig) -> LoadedDataset {
    let mut m = generate_synthetic(dir, &cfg.dataset, 5).unwrap();
    build_graph_dataset(dir, &mut m, &cfg.sampler, &cfg.edge, 2).unwrap();
    load_dataset(dir, &m, cfg).unwrap()
}

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn run_directory_contract_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let data = prepared(dir.path(), &cfg);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let ma = train_run(&data, &cfg, &a).unwrap();
    train_run(&data, &cfg, &b).unwrap();
    let mut want: Vec<String> = RUN_FILES.iter().map(|s| s.to_string()).collect();
    want.sort();
    assert_eq!(listing(&a), want);
    for f in RUN_FILES {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(ma.sizes.test, 3);
    assert_eq!(ma.sizes.train + ma.sizes.val, 15);
    let history = fs::read_to_string(a.join(HISTORY_FILE)).unwrap();
    assert_eq!(history.lines().count(), 3);

    let echo = RunConfig::load(&a.join(CONFIG_FILE)).unwrap();
    assert!(echo.cnn.input_norm.is_some());
    let c = dir.path().join("c");
    train_run(&data, &echo, &c).unwrap();
    assert_eq!(fs::read(a.join(METRICS_FILE)).unwrap(), fs::read(c.join(METRICS_FILE)).unwrap());

    let features = fs::read_to_string(a.join(FEATURES_FILE)).unwrap();
    let header = features.lines().next().unwrap();
    assert!(header.starts_with("id,split,label,cnn_pred,gcn_pred,cnn_p0"));
    assert_eq!(features.lines().count(), 1 + 18);
    let splits: Vec<&str> = features.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    for s in ["train", "val", "test"] {
        assert!(splits.contains(&s));
    }
}

#[test]
fn independent_matches_cotrain_with_closed_gates() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.cotrain.d_kl = f64::INFINITY;
    let data = prepared(dir.path(), &cfg);
    let co = dir.path().join("co");
    let ind = dir.path().join("ind");
    train_run(&data, &cfg, &co).unwrap();
    cfg.mode = TrainMode::Independent;
    train_run(&data, &cfg, &ind).unwrap();
    for f in [HISTORY_FILE, CNN_CHECKPOINT, GCN_CHECKPOINT, FEATURES_FILE] {
        assert_eq!(fs::read(co.join(f)).unwrap(), fs::read(ind.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn sweep_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let data = prepared(dir.path(), &cfg);
    let co = dir.path().join("co");
    let ind = dir.path().join("ind");
    let s = train_sweep(&data, &cfg, 2, &co, 2).unwrap();
    assert_eq!(listing(&co), ["seed_0", "seed_1", "summary.json"]);
    let accs: Vec<f64> = s.runs.iter().map(|r| r.gcn_accuracy).collect();
    assert!((s.gcn_accuracy.mean - (accs[0] + accs[1]) / 2.0).abs() < 1e-15);
    assert!((s.gcn_accuracy.std - (accs[0] - accs[1]).abs() / 2.0).abs() < 1e-15);

    let ind_cfg = RunConfig {
        mode: TrainMode::Independent,
        ..cfg.clone()
    };
    train_sweep(&data, &ind_cfg, 2, &ind, 1).unwrap();

    let single = build_report(&[co.join("seed_0")]).unwrap();
    assert_eq!(single.rows.len(), 1);
    assert!(single.rows[0].delta.is_none());
    assert!(single.mean_delta.is_none());

    let out = dir.path().join("report");
    let r = write_report(&[co.clone(), ind.clone()], &out).unwrap();
    assert_eq!(r.rows.len(), 4);
    for seed in [0u64, 1] {
        let load = |d: &PathBuf| RunMetrics::load(&d.join(seed_dir_name(seed)).join(METRICS_FILE)).unwrap();
        let (mc, mi) = (load(&co), load(&ind));
        let row = r.rows.iter().find(|x| x.seed == seed && x.mode == TrainMode::Cotrain).unwrap();
        let d = row.delta.unwrap();
        assert_eq!(d.gcn_accuracy, mc.gcn.accuracy - mi.gcn.accuracy);
        assert_eq!(d.cnn_macro_f1, mc.cnn.macro_f1 - mi.cnn.macro_f1);
    }
    let csv = fs::read_to_string(out.join(REPORT_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().next().unwrap().contains("gcn_f1_class_2"));
    assert!(out.join(REPORT_JSON).is_file());
}

#[test]
fn report_rejects_mismatched_class_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let data = prepared(dir.path(), &cfg);
    let a = dir.path().join("a");
    train_run(&data, &cfg, &a).unwrap();
    let b = dir.path().join("b");
    fs::create_dir_all(&b).unwrap();
    let mut m = RunMetrics::load(&a.join(METRICS_FILE)).unwrap();
    m.class_names.pop();
    fs::write(b.join(METRICS_FILE), serde_json::to_vec(&m).unwrap()).unwrap();
    let err = build_report(&[a, b]).unwrap_err();
    assert!(err.is_validation());
    assert!(err.to_string().contains("classes"));
}

#[test]
fn training_without_graphs_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let m = generate_synthetic(dir.path(), &cfg.dataset, 5).unwrap();
    let err = load_dataset(dir.path(), &m, &cfg).unwrap_err();
    assert!(err.to_string().contains("build-graphs"), "{err}");
}
