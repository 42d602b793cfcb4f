use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gft_core::gft::{count_trainable_params, estimate_flops};
use gft_core::pointops::PointCloud;
use gft_core::GftModel;
use gft_harness::augment::normalize;
use gft_harness::attention::{patch_attention, render_attention_csv};
use gft_harness::checkpoint::{load_checkpoint, save_checkpoint};
use gft_harness::cloud::load_cloud;
use gft_harness::config::{run_preset, Preset, RunConfig, Task};
use gft_harness::fewshot::sample_episode;
use gft_harness::manifest::{Manifest, Split};
use gft_harness::synth::{synth_dataset, SynthKind, SynthSpec};
use gft_harness::train::{evaluate, prepare, train, EpochLog, Metrics, TrainOptions, TrainOutcome};
use gft_harness::{Error, Result};

#[derive(Parser)]
#[command(name = "gft", version, about = "Graph feature tuning for point-cloud transformers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// key=value configuration file (defaults to the desk preset).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset and its manifest.
    Synth {
        #[arg(long, default_value = "classification4")]
        kind: SynthKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 100)]
        test: usize,
        #[arg(long, default_value_t = 256)]
        points: usize,
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fine-tune on a manifest's train split, keeping the best checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for `best.ckpt`, `last.ckpt` and `log.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Train only the head on top of the frozen backbone.
        #[arg(long)]
        linear_probe: bool,
    },
    /// Score a checkpoint on a manifest's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and score on one N-way K-shot episode drawn from the pool.
    FewShot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 5)]
        n_way: usize,
        #[arg(long, default_value_t = 10)]
        k_shot: usize,
    },
    /// Print the per-tensor trainable/frozen ledger.
    CountParams {
        #[command(flatten)]
        common: Common,
    },
    /// Print per-component FLOPs of one forward pass.
    EstimateFlops {
        #[command(flatten)]
        common: Common,
    },
    /// Write per-patch CLS attention of one encoder layer as CSV.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        layer: usize,
        /// Per-patch weight on the CLS key instead of CLS weight on patches.
        #[arg(long)]
        reverse: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Loads the run configuration, filling task and class count from the
/// dataset when the file leaves them out.
fn run_config(path: Option<&Path>, data: Option<(Task, usize)>, seed: u64) -> Result<RunConfig> {
    let (task, n) = data.unwrap_or((Task::Classification, 4));
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            RunConfig::parse_with(p, &text, task, n)?
        }
        None => run_preset(Preset::Desk, task, n),
    };
    cfg.train.seed = seed;
    Ok(cfg)
}

struct Dataset {
    task: Task,
    classes: usize,
    train: Vec<PointCloud>,
    test: Vec<PointCloud>,
}

fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let m = Manifest::load(manifest)?;
    let train = m.load_split(Split::Train)?;
    let test = m.load_split(Split::Test)?;
    let (task, classes) = if m.is_classification() {
        (Task::Classification, m.num_classes())
    } else {
        let parts = train
            .iter()
            .chain(&test)
            .filter_map(|c| c.point_labels.as_ref())
            .flat_map(|l| l.iter().copied())
            .max()
            .map_or(0, |x| x + 1);
        (Task::Segmentation, parts)
    };
    Ok(Dataset {
        task,
        classes,
        train,
        test,
    })
}

fn describe(m: &Metrics) -> String {
    match *m {
        Metrics::Classification { oa } => format!("OA {:.4}", oa),
        Metrics::Segmentation {
            oa,
            instance_miou,
            class_miou,
        } => format!("OA {oa:.4}  instance mIoU {instance_miou:.4}  class mIoU {class_miou:.4}"),
    }
}

fn fit(cfg: &RunConfig, seed: u64, train_set: &[PointCloud], test_set: &[PointCloud], log: Option<&Path>) -> Result<(GftModel<f32>, TrainOutcome)> {
    let mut model = GftModel::<f32>::new(cfg.model.clone(), seed)?;
    let train_set = prepare(train_set, cfg.data.num_points)?;
    let test_set = prepare(test_set, cfg.data.num_points)?;
    let mut sink = match log {
        Some(p) => {
            let mut f = fs::File::create(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            let _ = writeln!(f, "{}", EpochLog::CSV_HEADER);
            Some(f)
        }
        None => None,
    };
    println!("{}", EpochLog::CSV_HEADER);
    let opts = TrainOptions {
        augment: cfg.data.augment,
        eval_every: cfg.data.eval_every,
    };
    let outcome = train(&mut model, &train_set, &test_set, &cfg.train, opts, |row| {
        println!("{}", row.csv_row());
        if let Some(f) = sink.as_mut() {
            let _ = writeln!(f, "{}", row.csv_row());
        }
    })?;
    Ok((model, outcome))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth {
            kind,
            out,
            train,
            test,
            points,
            noise,
            seed,
        } => {
            fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let spec = SynthSpec {
                noise,
                ..SynthSpec::new(kind, train, test, points, seed)
            };
            let m = synth_dataset(&spec, &out)?;
            println!("wrote {} clouds to {}", m.entries.len(), out.display());
        }
        Cmd::Train {
            common,
            manifest,
            out,
            linear_probe,
        } => {
            let data = load_dataset(&manifest)?;
            let mut cfg = run_config(common.config.as_deref(), Some((data.task, data.classes)), common.seed)?;
            if linear_probe {
                cfg.model = cfg.model.linear_probe();
            }
            fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let (mut model, outcome) = fit(&cfg, common.seed, &data.train, &data.test, Some(&out.join("log.csv")))?;
            save_checkpoint(&out.join("last.ckpt"), &model)?;
            model.load_store(outcome.best_store)?;
            save_checkpoint(&out.join("best.ckpt"), &model)?;
            match outcome.best {
                Some(m) => println!("best epoch {}: {}", outcome.best_epoch, describe(&m)),
                None => println!("no test split; saved final parameters"),
            }
        }
        Cmd::Eval {
            checkpoint,
            manifest,
            config,
            seed,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let data = load_dataset(&manifest)?;
            let cfg = run_config(config.as_deref(), Some((data.task, data.classes)), seed)?;
            let test = prepare(&data.test, cfg.data.num_points)?;
            println!("{}", describe(&evaluate(&model, &test)?));
        }
        Cmd::FewShot {
            common,
            manifest,
            n_way,
            k_shot,
        } => {
            let data = load_dataset(&manifest)?;
            if data.task != Task::Classification {
                return Err(Error::Argument("few-shot needs a classification manifest".into()));
            }
            let pool: Vec<PointCloud> = data.train.into_iter().chain(data.test).collect();
            let ep = sample_episode(&pool, n_way, k_shot, common.seed)?;
            println!("classes {:?}: {} support, {} query", ep.classes, ep.support.len(), ep.query.len());
            let cfg = run_config(common.config.as_deref(), Some((Task::Classification, n_way)), common.seed)?;
            let (_, outcome) = fit(&cfg, common.seed, &ep.support, &ep.query, None)?;
            if let Some(m) = outcome.best {
                println!("{n_way}-way {k_shot}-shot best epoch {}: {}", outcome.best_epoch, describe(&m));
            }
        }
        Cmd::CountParams { common } => {
            let cfg = run_config(common.config.as_deref(), None, common.seed)?;
            let model = GftModel::<f32>::new(cfg.model, common.seed)?;
            let ledger = count_trainable_params(&model.store);
            println!("{ledger}");
        }
        Cmd::EstimateFlops { common } => {
            let cfg = run_config(common.config.as_deref(), None, common.seed)?;
            let report = estimate_flops(&cfg.model, cfg.data.num_points);
            for (name, f) in &report.parts {
                println!("{name:<24} {f:>16}");
            }
            println!("{:<24} {:>16}  ({:.2} GFLOPs)", "total", report.total(), report.total() as f64 / 1e9);
        }
        Cmd::ExportAttention {
            checkpoint,
            cloud,
            layer,
            reverse,
            out,
            seed: _,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let mut c = load_cloud(&cloud)?;
            normalize(&mut c);
            let a = patch_attention(&model, &c, layer, reverse)?;
            fs::write(&out, render_attention_csv(&a)).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            println!("wrote {} patch weights to {}", a.map.weights.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
