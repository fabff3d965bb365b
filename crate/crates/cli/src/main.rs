use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use actgraph::pipeline::{
    build_graph_dataset, generate_synthetic, ingest_dataset, load_dataset, run_adapt, run_explain, train_run,
    train_sweep, write_report, RunConfig, TrainMode, MANIFEST_FILE, REPORT_CSV,
};
use actgraph::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "actgraph", version, about = "Co-train a cell-graph GCN and a pixel CNN on histology patches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for graph building and seed sweeps.
    #[arg(long, value_name = "N", default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Cotrain,
    Independent,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Cotrain => TrainMode::Cotrain,
            ModeArg::Independent => TrainMode::Independent,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic labelled dataset of images and instance masks.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Dataset directory [default: paths.data_dir].
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Validate a dataset directory and write its manifest if it has none.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Dataset directory [default: paths.data_dir].
        dir: Option<PathBuf>,
    },
    /// Build one cell graph per sample.
    BuildGraphs {
        #[command(flatten)]
        common: Common,
        /// Dataset directory [default: paths.data_dir].
        dir: Option<PathBuf>,
    },
    /// Train both branches, co-trained or independently.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory [default: paths.data_dir].
        dir: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Run K seeds starting at the configured one, each in seed_<s>/.
        #[arg(long, value_name = "K")]
        seeds: Option<usize>,
        /// Run directory [default: <paths.runs_dir>/<mode>].
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Grad-CAM heatmaps of one or two CNN checkpoints on an image.
    Explain {
        #[command(flatten)]
        common: Common,
        /// CNN checkpoint; give it twice to compare two models.
        #[arg(long = "checkpoint", value_name = "PATH", required = true, num_args = 1)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
        /// Class to explain [default: the first checkpoint's prediction].
        #[arg(long = "class", value_name = "K")]
        class_id: Option<usize>,
        /// Divide both maps by the same maximum so intensities compare.
        #[arg(long)]
        shared_norm: bool,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Tabulate finished runs with co-trained minus independent deltas.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run or sweep directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Run the toy segmentation domain adaptation.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Print the effective configuration (the defaults without --config).
    Config {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if common.jobs == 0 {
        return Err(Error::Validation("--jobs must be at least 1".into()));
    }
    Ok(cfg)
}

fn data_dir(dir: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    dir.unwrap_or_else(|| cfg.paths.data_dir.clone())
}

fn ingest(dir: &Path, cfg: &RunConfig) -> Result<actgraph::pipeline::DatasetManifest, Error> {
    ingest_dataset(dir, cfg.dataset.test_fraction, cfg.seed)
}

fn run(cli: Cli) -> Result<(), Error> {
    let started = Instant::now();
    match cli.command {
        Command::Generate { common, out } => {
            let cfg = load_config(&common)?;
            cfg.dataset.validate()?;
            let dir = data_dir(out, &cfg);
            let m = generate_synthetic(&dir, &cfg.dataset, cfg.seed)?;
            println!("wrote {} samples in {} classes to {}", m.samples.len(), m.num_classes(), dir.display());
        }
        Command::Ingest { common, dir } => {
            let cfg = load_config(&common)?;
            let dir = data_dir(dir, &cfg);
            let m = ingest(&dir, &cfg)?;
            for (name, c) in m.class_names.iter().zip(&m.class_counts) {
                println!("{name}: {} train, {} test", c.train, c.test);
            }
            println!("manifest {} is valid", dir.join(MANIFEST_FILE).display());
        }
        Command::BuildGraphs { common, dir } => {
            let cfg = load_config(&common)?;
            cfg.validate()?;
            let dir = data_dir(dir, &cfg);
            let mut m = ingest(&dir, &cfg)?;
            let r = build_graph_dataset(&dir, &mut m, &cfg.sampler, &cfg.edge, common.jobs)?;
            for f in &r.failures {
                eprintln!("warning: {} excluded: {}", f.id, f.error);
            }
            println!(
                "built {} graphs ({} failed), mean {:.1} nodes and {:.2} edges per node",
                r.built,
                r.failures.len(),
                r.mean_nodes,
                r.mean_degree
            );
            if r.built > 0 && r.mean_degree < 1.0 {
                eprintln!("warning: graphs are nearly edgeless; consider a larger edge.d or smaller edge.alpha/beta");
            }
        }
        Command::Train {
            common,
            dir,
            mode,
            seeds,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = mode {
                cfg.mode = m.into();
            }
            cfg.validate()?;
            let dir = data_dir(dir, &cfg);
            let manifest = ingest(&dir, &cfg)?;
            let data = load_dataset(&dir, &manifest, &cfg)?;
            for id in &data.excluded {
                eprintln!("warning: {id} has no graph and is excluded");
            }
            let out = out.unwrap_or_else(|| cfg.paths.runs_dir.join(cfg.mode.as_str()));
            match seeds {
                Some(k) => {
                    let s = train_sweep(&data, &cfg, k, &out, common.jobs)?;
                    println!(
                        "{} seeds, test accuracy cnn {:.4} ± {:.4}, gcn {:.4} ± {:.4}",
                        s.runs.len(),
                        s.cnn_accuracy.mean,
                        s.cnn_accuracy.std,
                        s.gcn_accuracy.mean,
                        s.gcn_accuracy.std
                    );
                }
                None => {
                    let m = train_run(&data, &cfg, &out)?;
                    println!(
                        "test accuracy cnn {:.4}, gcn {:.4}; macro F1 cnn {:.4}, gcn {:.4}",
                        m.cnn.accuracy, m.gcn.accuracy, m.cnn.macro_f1, m.gcn.macro_f1
                    );
                }
            }
            println!("outputs in {}", out.display());
        }
        Command::Explain {
            common,
            checkpoints,
            image,
            class_id,
            shared_norm,
            out,
        } => {
            load_config(&common)?;
            let refs: Vec<&Path> = checkpoints.iter().map(PathBuf::as_path).collect();
            let r = run_explain(&refs, &image, class_id, shared_norm, &out)?;
            for m in &r.maps {
                println!("{}: class {} (predicted {}) -> {}", m.checkpoint, m.class_id, m.predicted, out.join(&m.heatmap).display());
            }
        }
        Command::Report { common, runs, out } => {
            load_config(&common)?;
            let r = write_report(&runs, &out)?;
            println!("{} runs tabulated in {}", r.rows.len(), out.join(REPORT_CSV).display());
            if let Some(d) = r.mean_delta {
                println!(
                    "co-trained minus independent: cnn accuracy {:+.4}, gcn accuracy {:+.4}",
                    d.cnn_accuracy, d.gcn_accuracy
                );
            }
        }
        Command::Adapt { common, out } => {
            let cfg = load_config(&common)?;
            let o = run_adapt(&cfg, &out)?;
            if let (Some(first), Some(last)) = (o.trace.first(), o.trace.last()) {
                println!(
                    "held-out target dice loss {:.4} -> {:.4} over {} epochs",
                    first.eval_target_dice,
                    last.eval_target_dice,
                    o.trace.len() - 1
                );
            }
        }
        Command::Config { common } => {
            let cfg = load_config(&common)?;
            cfg.validate()?;
            print!("{}", cfg.to_json_pretty());
        }
    }
    eprintln!("finished in {:.1} s", started.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
