use std::path::{Path, PathBuf};
use std::process::Command;

use fret_core::data::synthetic::SyntheticSpec;
use fret_core::data::{build_stream, CorruptionKind, ParamTable};
use fret_core::engine::Method;
use fret_core::redundancy::NrsTrace;
use fret_harness::config::{DataConfig, ExperimentConfig, ModelConfig};
use fret_harness::plot::{plot_traces, read_chart};
use fret_harness::report::{read_jsonl, read_summary};
use fret_harness::run::run_experiment;
use fret_harness::sweep::{read_sweep, redundancy_sweep, write_sweep, SweepSpec};
use fret_harness::HarnessError;

fn checkpoint() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/source_cnn.json")
}

fn config(out: &Path, methods: Vec<Method>, seeds: Vec<u64>) -> ExperimentConfig {
    ExperimentConfig {
        methods,
        seeds,
        out: out.to_path_buf(),
        model: ModelConfig {
            checkpoint: checkpoint(),
            cut: "head".into(),
        },
        data: DataConfig {
            path: None,
            synthetic: Some(SyntheticSpec {
                size: 16,
                per_class: 20,
                seed: 1,
            }),
            corruptions: vec!["gaussian_noise-5".into()],
            table: ParamTable::Cifar,
            longtail: None,
            archive_root: None,
        },
        adaptation: Default::default(),
        method_lr: Default::default(),
    }
}

#[test]
fn source_run_reports_frozen_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), vec![Method::Source], vec![0]);
    let rows = run_experiment(&cfg).unwrap();
    assert_eq!(rows.len(), 1);

    let model = cfg.load_model().unwrap();
    let data = cfg.load_dataset().unwrap();
    let spec = cfg.stream_spec(0).unwrap();
    let (mut correct, mut seen) = (0, 0);
    for seg in build_stream(&data, &spec).unwrap() {
        for b in seg.unwrap().batches {
            let logits = model.head_logits(&model.embed(&b.images, fret_core::model::NormMode::Stored));
            let labels = b.labels.unwrap();
            correct += logits.argmax_rows().iter().zip(&labels).filter(|(p, l)| p == l).count();
            seen += labels.len();
        }
    }
    assert_eq!(rows[0].final_accuracy, correct as f64 / seen as f64);
    assert!(rows[0].wall_clock_s > 0.0);

    for name in ["summary.csv", "steps.source.0.jsonl", "nrs.source.0.csv", "plots/nrs.seed0.png"] {
        assert!(dir.path().join(name).is_file(), "{name} missing");
    }
    assert_eq!(read_summary(&dir.path().join("summary.csv")).unwrap(), rows);
}

#[test]
fn summary_aggregates_over_seeds_and_plots_match_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), vec![Method::Source, Method::Sfret], vec![0, 1]);
    let rows = run_experiment(&cfg).unwrap();
    assert_eq!(rows.len(), 4);
    for method in ["source", "sfret"] {
        let accs: Vec<f64> = rows.iter().filter(|r| r.method == method).map(|r| r.final_accuracy).collect();
        let mean = (accs[0] + accs[1]) / 2.0;
        let std = ((accs[0] - mean).powi(2) + (accs[1] - mean).powi(2)).sqrt();
        for r in rows.iter().filter(|r| r.method == method) {
            assert!((r.accuracy_mean - mean).abs() < 1e-12);
            assert!((r.accuracy_std - std).abs() < 1e-12);
        }
    }

    let (legend, series) = read_chart(&dir.path().join("plots/nrs.seed1.png")).unwrap();
    assert_eq!(legend, vec!["source", "sfret"]);
    let text = std::fs::read_to_string(dir.path().join("nrs.sfret.1.csv")).unwrap();
    let trace = NrsTrace::parse_csv(&text).unwrap();
    let plotted = &series[1];
    assert_eq!(plotted.y.len(), trace.len());
    let csv_values: Vec<f64> = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(plotted.y, csv_values);

    let logs = read_jsonl(&dir.path().join("steps.sfret.1.jsonl")).unwrap();
    assert_eq!(logs.len(), plotted.x.len());
}

#[test]
fn single_record_plot_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), vec![Method::Source], vec![0]);
    run_experiment(&cfg).unwrap();
    let mut logs = read_jsonl(&dir.path().join("steps.source.0.jsonl")).unwrap();
    logs.truncate(1);
    let out = dir.path().join("one");
    let written = plot_traces(&[("source".into(), logs)], &out).unwrap();
    assert!(!written.is_empty());
    for p in written {
        assert!(std::fs::metadata(&p).unwrap().len() > 0);
    }
}

#[test]
fn sweep_has_a_clean_row_per_kind() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), vec![Method::Source], vec![0]);
    let spec = SweepSpec {
        kinds: vec![CorruptionKind::GaussianNoise, CorruptionKind::Contrast],
        severities: vec![1, 3, 5],
        batch_size: 64,
        table: ParamTable::Cifar,
        seed: 0,
    };
    let rows = redundancy_sweep(&cfg.load_model().unwrap(), &cfg.load_dataset().unwrap(), &spec).unwrap();
    assert_eq!(rows.len(), 2 * (3 + 1));
    assert_eq!(rows.iter().filter(|r| r.severity == 0).count(), 2);
    let p = dir.path().join("sweep.csv");
    write_sweep(&rows, &p).unwrap();
    assert_eq!(read_sweep(&p).unwrap(), rows);
}

#[test]
fn config_errors_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut cfg = config(&out, vec![Method::Sfret], vec![0]);
    cfg.adaptation.k2 = 1.5;
    assert!(matches!(run_experiment(&cfg), Err(HarnessError::Config(_))));
    cfg.adaptation.k2 = 0.9;
    cfg.seeds.clear();
    assert!(matches!(run_experiment(&cfg), Err(HarnessError::Config(_))));
    assert!(!out.exists());
}

#[test]
fn runtime_failure_keeps_partial_logs() {
    let dir = tempfile::tempdir().unwrap();
    let empty_archive = dir.path().join("archive");
    std::fs::create_dir_all(&empty_archive).unwrap();
    let mut cfg = config(&dir.path().join("out"), vec![Method::Source], vec![0]);
    cfg.data.corruptions = vec!["gaussian_noise-5".into(), "fog-3".into()];
    cfg.data.archive_root = Some(empty_archive);
    let err = run_experiment(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    let partial = read_jsonl(&dir.path().join("out/steps.source.0.jsonl")).unwrap();
    assert!(!partial.is_empty());
    assert!(partial.iter().all(|r| r.segment == 0));
}

#[test]
fn cli_validates_and_uses_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let toml = format!(
        "methods = [\"source\"]\nout = \"out\"\n[model]\ncheckpoint = \"{}\"\n[data]\nsynthetic = {{ size = 16, per_class = 10, seed = 1 }}\ncorruptions = [\"gaussian_noise-2\"]\n",
        checkpoint().display()
    );
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, toml).unwrap();
    let fret = env!("CARGO_BIN_EXE_fret");

    let ok = Command::new(fret).args(["validate", "--config"]).arg(&cfg).output().unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));

    let bad = Command::new(fret)
        .args(["validate", "--k2", "2", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));

    let run = Command::new(fret)
        .args(["adapt", "--method", "source", "--method", "gfret", "--seed", "3", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let out = dir.path().join("out");
    assert!(out.join("steps.gfret.3.jsonl").is_file());

    let plots = dir.path().join("replot");
    let replot = Command::new(fret)
        .args(["plot", "--logs"])
        .arg(&out)
        .arg("--out")
        .arg(&plots)
        .output()
        .unwrap();
    assert!(replot.status.success(), "{}", String::from_utf8_lossy(&replot.stderr));
    let (legend, _) = read_chart(&plots.join("accuracy.png")).unwrap();
    assert_eq!(legend, vec!["gfret", "source"]);
}
