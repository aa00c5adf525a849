use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use fret_core::data::synthetic::{self, SyntheticSpec};
use fret_core::data::{CorruptionKind, Dataset};
use fret_core::engine::{Method, Protocol};
use fret_core::model::Classifier;
use fret_core::train::{evaluate, train_classifier, TrainConfig};
use fret_harness::config::{ExperimentConfig, Overrides};
use fret_harness::plot::plot_traces;
use fret_harness::report::read_jsonl;
use fret_harness::sweep::{plot_sweep, redundancy_sweep, write_sweep, SweepSpec};
use fret_harness::{run_experiment, HarnessError};
use rand::SeedableRng;

#[derive(Parser)]
#[command(name = "fret", version, about = "Feature-redundancy-elimination test-time adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured (method, seed) pair over the test stream.
    Adapt(RunArgs),
    /// Mean redundancy of the frozen model's embeddings per corruption severity.
    Sweep(SweepArgs),
    /// Redraw NRS/loss/accuracy plots from stored step logs.
    Plot(PlotArgs),
    /// Check a configuration without running it.
    Validate(RunArgs),
    /// Write the synthetic shapes dataset to disk.
    GenData(GenArgs),
    /// Train the source classifier checkpoint.
    TrainSource(TrainArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long = "method")]
    methods: Vec<Method>,
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    k1: Option<usize>,
    #[arg(long)]
    k2: Option<f64>,
    #[arg(long)]
    protocol: Option<Protocol>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> fret_harness::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            methods: self.methods.clone(),
            seeds: self.seeds.clone(),
            lr: self.lr,
            lambda: self.lambda,
            k1: self.k1,
            k2: self.k2,
            protocol: self.protocol,
            out: self.out.clone(),
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment config supplying the checkpoint and the clean data.
    #[arg(long)]
    config: PathBuf,
    /// Corruption kinds (repeatable).
    #[arg(long = "kind", default_value = "gaussian_noise")]
    kinds: Vec<CorruptionKind>,
    #[arg(long = "severity", default_values_t = [1u8, 2, 3, 4, 5])]
    severities: Vec<u8>,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// Directory holding `steps.<method>.<seed>.jsonl` files.
    #[arg(long)]
    logs: PathBuf,
    /// Only plot this seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    per_class: usize,
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training set directory (as written by `gen-data`).
    #[arg(long)]
    data: PathBuf,
    /// Optional held-out set for reporting accuracy.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [16usize, 32, 32])]
    widths: Vec<usize>,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<HarnessError>().map_or(1, HarnessError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Adapt(a) => {
            let cfg = a.load()?;
            let rows = run_experiment(&cfg)?;
            for r in rows.iter().filter(|r| r.seed == cfg.seeds[0]) {
                println!(
                    "{:<12} {:<24} acc {:.4} (mean {:.4} ± {:.4})",
                    r.method, r.segment, r.final_accuracy, r.accuracy_mean, r.accuracy_std
                );
            }
            println!("wrote {}", cfg.out.display());
        }
        Command::Validate(a) => {
            let cfg = a.load()?;
            println!(
                "ok: {} method(s) × {} seed(s), {} segment(s)",
                cfg.methods.len(),
                cfg.seeds.len(),
                cfg.data.corruptions.len()
            );
        }
        Command::Sweep(a) => {
            let mut cfg = ExperimentConfig::load(&a.config)?;
            if let Some(out) = a.out {
                cfg.out = out;
            }
            let model = cfg.load_model()?;
            let data = cfg.load_dataset()?;
            let spec = SweepSpec {
                kinds: a.kinds,
                severities: a.severities,
                batch_size: a.batch_size,
                table: cfg.data.table,
                seed: a.seed,
            };
            let rows = redundancy_sweep(&model, &data, &spec)?;
            write_sweep(&rows, &cfg.out.join("sweep.csv"))?;
            plot_sweep(&rows, &cfg.out.join("plots").join("sweep.png"))?;
            for r in &rows {
                println!("{:<18} {} R_e {:.4} acc {:.4}", r.kind, r.severity, r.mean_redundancy, r.accuracy);
            }
        }
        Command::Plot(a) => {
            let runs = load_logs(&a.logs, a.seed)?;
            for p in plot_traces(&runs, &a.out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::GenData(a) => {
            let ds = synthetic::generate(&SyntheticSpec {
                size: a.size,
                per_class: a.per_class,
                seed: a.seed,
            });
            ds.save(&a.out)?;
            println!("wrote {} images to {}", ds.len(), a.out.display());
        }
        Command::TrainSource(a) => train_source(a)?,
    }
    Ok(())
}

/// Reads every `steps.<method>.<seed>.jsonl` under `dir`, labelled by method
/// (and seed when several are present), in sorted order.
fn load_logs(
    dir: &Path,
    seed: Option<u64>,
) -> anyhow::Result<Vec<(String, Vec<fret_core::engine::AdaptationRecord>)>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(stem) = name.strip_prefix("steps.").and_then(|n| n.strip_suffix(".jsonl")) else {
            continue;
        };
        let Some((method, s)) = stem.rsplit_once('.') else { continue };
        let Ok(s) = s.parse::<u64>() else { continue };
        if seed.is_some_and(|want| want != s) {
            continue;
        }
        found.push((method.to_string(), s, path));
    }
    found.sort();
    let many_seeds = found.iter().any(|f| f.1 != found[0].1);
    found
        .into_iter()
        .map(|(m, s, p)| {
            let label = if many_seeds { format!("{m}.{s}") } else { m };
            Ok((label, read_jsonl(&p)?))
        })
        .collect()
}

fn train_source(a: TrainArgs) -> anyhow::Result<()> {
    let data = Dataset::load(&a.data)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
    let init = Classifier::small_cnn(
        [data.channels, data.height, data.width],
        &a.widths,
        data.num_classes(),
        &mut rng,
    );
    let cfg = TrainConfig {
        epochs: a.epochs,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let (model, _) = train_classifier(&init, &data, &cfg, |s| {
        println!("epoch {:>3}  loss {:.4}  train acc {:.4}", s.epoch, s.mean_loss, s.train_accuracy)
    })?;
    if let Some(p) = &a.eval {
        let held_out = Dataset::load(p)?;
        println!("held-out accuracy {:.4}", evaluate(&model, &held_out, 256));
    }
    model.save_json(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}
