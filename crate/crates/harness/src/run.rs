//! Experiment execution: every (method, seed) pair adapts over its own
//! stream with a private model copy; results are merged in sorted order.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use fret_core::data::{build_stream, Dataset, StreamSpec};
use fret_core::engine::{run_stream_with, AdaptationConfig, AdaptationRecord, Method};
use fret_core::model::SplitModel;
use fret_core::redundancy::NrsTrace;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::plot::plot_traces;
use crate::report::{fill_aggregates, summarize_run, write_summary, SummaryRow};

pub const WORKERS_ENV: &str = "FRET_NUM_WORKERS";

#[derive(Clone, Debug)]
pub struct JobResult {
    pub method: Method,
    pub seed: u64,
    pub records: Vec<AdaptationRecord>,
    pub nrs: NrsTrace,
    /// Wall-clock seconds spent on each step.
    pub step_seconds: Vec<f64>,
}

/// Worker count: `FRET_NUM_WORKERS` when set to a positive integer,
/// otherwise the available parallelism.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Adapts `model` over the stream of `stream` with `cfg`. When `log` is
/// given every record is appended to it as a JSON line as soon as it
/// exists, so a failing run keeps its partial log.
pub fn run_job(
    model: &SplitModel,
    base: &Dataset,
    stream: &StreamSpec,
    cfg: &AdaptationConfig,
    log: Option<&Path>,
) -> Result<JobResult> {
    let mut sink = match log {
        Some(p) => Some((
            BufWriter::new(File::create(p).map_err(|e| HarnessError::io(p, e))?),
            p,
        )),
        None => None,
    };
    let mut records = Vec::new();
    let mut step_seconds = Vec::new();
    let mut last = Instant::now();
    let mut sink_err = None;
    let outcome = run_stream_with(model, build_stream(base, stream)?, cfg, |rec, _| {
        let now = Instant::now();
        step_seconds.push(now.duration_since(last).as_secs_f64());
        last = now;
        if let Some((w, p)) = &mut sink {
            let line = serde_json::to_string(rec).expect("record serializes");
            if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                sink_err = Some(HarnessError::io(*p, e));
                return Err(fret_core::Error::InvalidArgument("log write failed".into()));
            }
        }
        records.push(rec.clone());
        Ok(())
    });
    if let Some(e) = sink_err {
        return Err(e);
    }
    let adapter = outcome?;
    Ok(JobResult {
        method: cfg.method,
        seed: cfg.seed,
        records,
        nrs: adapter.nrs().clone(),
        step_seconds,
    })
}

/// Runs every (method, seed) pair of `cfg` and writes under `cfg.out`:
/// `steps.<method>.<seed>.jsonl`, `nrs.<method>.<seed>.csv`, `summary.csv`
/// and `plots/{nrs,loss,accuracy}.seed<seed>.png`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    let model = cfg.load_model()?;
    let base = cfg.load_dataset()?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| HarnessError::io(&cfg.out, e))?;

    let mut jobs: Vec<(Method, u64)> = Vec::new();
    for &m in &cfg.methods {
        for &s in &cfg.seeds {
            jobs.push((m, s));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<JobResult>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(method, seed)| {
                let log = cfg.out.join(format!("steps.{method}.{seed}.jsonl"));
                run_job(&model, &base, &cfg.stream_spec(seed)?, &cfg.adaptation_for(method, seed), Some(&log))
            })
            .collect()
    });
    let mut done = Vec::new();
    for r in results {
        done.push(r?);
    }
    done.sort_by_key(|j| (j.method, j.seed));

    let protocol = cfg.adaptation.protocol.to_string();
    let mut rows = Vec::new();
    for j in &done {
        let p = cfg.out.join(format!("nrs.{}.{}.csv", j.method, j.seed));
        j.nrs.save_csv(&p)?;
        rows.extend(summarize_run(
            j.method.name(),
            &protocol,
            j.seed,
            &j.records,
            &j.step_seconds,
        ));
    }
    fill_aggregates(&mut rows);
    write_summary(&rows, &cfg.out.join("summary.csv"))?;
    write_plots(&done, &cfg.out.join("plots"))?;
    Ok(rows)
}

fn write_plots(done: &[JobResult], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut seeds: Vec<u64> = done.iter().map(|j| j.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut written = Vec::new();
    for seed in seeds {
        let runs: Vec<(String, Vec<AdaptationRecord>)> = done
            .iter()
            .filter(|j| j.seed == seed)
            .map(|j| (j.method.name().to_string(), j.records.clone()))
            .collect();
        let tmp = dir.join(format!("seed{seed}"));
        for p in plot_traces(&runs, &tmp)? {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("plot").to_string();
            let dest = dir.join(format!("{stem}.seed{seed}.png"));
            std::fs::rename(&p, &dest).map_err(|e| HarnessError::io(&dest, e))?;
            written.push(dest);
        }
        std::fs::remove_dir(&tmp).map_err(|e| HarnessError::io(&tmp, e))?;
    }
    Ok(written)
}
