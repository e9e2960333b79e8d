use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use contextad::detector::Aggregation;
use contextad::evalkit::{select_threshold, EvalMode};
use contextad::series::{Dataset, LabelState, Split, TimeSeries};
use contextad_cli::bench::{run_bench, BenchConfig, CELLS_DIR, SUMMARY_JSON, SUMMARY_TXT};
use contextad_cli::commands::{
    cmd_evaluate, cmd_inject, cmd_score, cmd_synth, cmd_train, EvaluateArgs, InjectArgs, ScoreArgs, ScoreOptions,
    SynthArgs, ThresholdSource, TrainArgs, CHECKPOINT_FILE, REPORT_FILE, RESOLVED_CONFIG_FILE,
};
use contextad_cli::config::parse_text;
use contextad_cli::io::{load_dataset, read_traces, write_dataset, write_traces, SplitDatasets};

fn sine(id: &str, len: usize, phase: f64, spike: Option<usize>) -> TimeSeries {
    let mut values: Vec<f64> = (0..len).map(|t| (t as f64 / 4.0 + phase).sin()).collect();
    let mut labels = vec![LabelState::Normal; len];
    if let Some(p) = spike {
        values[p] += 4.0;
        labels[p] = LabelState::Anomalous;
    }
    TimeSeries::univariate(id, values, labels).unwrap()
}

/// Two short train series and two labeled test series.
fn smoke_dataset(dir: &Path) -> PathBuf {
    let train = Dataset::new(Split::Train, vec![sine("a", 80, 0.0, None), sine("b", 80, 1.0, None)]).unwrap();
    let test = Dataset::new(Split::Test, vec![sine("a", 60, 0.3, Some(40)), sine("b", 60, 0.7, Some(25))]).unwrap();
    let data = SplitDatasets::from_datasets("smoke", vec![train, test]).unwrap();
    write_dataset(&dir.join("data"), &data).unwrap()
}

const RUN_TOML: &str = r#"
dataset = "data"
output_dir = "runs"

[train]
series_per_batch = 2
crops_per_series = 4
epochs = 2
batches_per_epoch = 5

[train.window]
context_length = 12
suspect_length = 4
stride = 1

[train.encoder]
input_channels = 1
num_blocks = 2
hidden_channels = 4
embedding_dim = 4

[train.augment]
coe_rate = 0.5
mixup_rate = 0.5
po_count_per_series = 2
"#;

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    smoke_dataset(dir.path());
    let config = dir.path().join("run.toml");
    fs::write(&config, RUN_TOML).unwrap();
    (dir, config)
}

fn train(config: &Path, seed: u64) -> contextad_cli::commands::TrainOutcome {
    cmd_train(&TrainArgs {
        config: config.to_path_buf(),
        seed: Some(seed),
        output_dir: None,
    })
    .unwrap()
}

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let (dir, config) = setup();
    let started = std::time::Instant::now();
    let a = train(&config, 7);
    assert!(started.elapsed().as_secs() < 60);
    for f in [CHECKPOINT_FILE, REPORT_FILE, RESOLVED_CONFIG_FILE] {
        assert!(a.run_dir.join(f).is_file(), "{f}");
    }
    assert!(a.run_dir.file_name().unwrap().to_string_lossy().ends_with("-seed7"));
    let first = fs::read(&a.checkpoint).unwrap();

    let other = dir.path().join("again");
    let b = cmd_train(&TrainArgs {
        config: config.clone(),
        seed: Some(7),
        output_dir: Some(other),
    })
    .unwrap();
    assert_eq!(first, fs::read(&b.checkpoint).unwrap());
    assert_eq!(a.report.without_timing(), b.report.without_timing());

    let c = train(&config, 8);
    assert_ne!(first, fs::read(&c.checkpoint).unwrap());
    assert_eq!(a.run_dir.parent(), c.run_dir.parent());

    // every default is materialized in the resolved config
    let resolved = fs::read_to_string(a.run_dir.join(RESOLVED_CONFIG_FILE)).unwrap();
    for key in ["clip_norm", "mixup_alpha", "early_stopping", "learning_rate", "kernel_size", "standardize"] {
        assert!(resolved.contains(key), "{key} missing");
    }
}

#[test]
fn missing_config_key_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, RUN_TOML.replace("context_length = 12", "")).unwrap();
    let err = cmd_train(&TrainArgs {
        config,
        seed: None,
        output_dir: None,
    })
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("context_length"), "{err}");
}

fn score(dir: &Path, checkpoint: &Path, name: &str, options: ScoreOptions) -> (PathBuf, Vec<contextad::detector::ScoreTrace>) {
    let out = dir.join(name);
    let traces = cmd_score(&ScoreArgs {
        checkpoint: checkpoint.to_path_buf(),
        dataset: dir.join("data"),
        split: Split::Test,
        output: out.clone(),
        options,
    })
    .unwrap();
    (out, traces)
}

#[test]
fn score_and_evaluate() {
    let (dir, config) = setup();
    let run = train(&config, 1);
    let dir = dir.path();

    let (mean_dir, mean) = score(dir, &run.checkpoint, "mean", ScoreOptions::default());
    let csvs: Vec<_> = fs::read_dir(&mean_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "csv"))
        .collect();
    assert_eq!(csvs.len(), 2);
    let text = fs::read_to_string(mean_dir.join("a.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "timestamp,score,probability,scored");
    // context rows are unscored, marked in the sentinel column
    assert!(lines.next().unwrap().ends_with(",,,0"));
    assert_eq!(read_traces(&mean_dir).unwrap(), mean);

    let (again_dir, again) = score(dir, &run.checkpoint, "again", ScoreOptions::default());
    assert_eq!(mean, again);
    for f in ["a.csv", "b.csv", "traces.json"] {
        assert_eq!(fs::read(mean_dir.join(f)).unwrap(), fs::read(again_dir.join(f)).unwrap());
    }

    let max_opts = ScoreOptions {
        aggregation: Aggregation::MaxFirstAlert,
        ..Default::default()
    };
    let (_, max) = score(dir, &run.checkpoint, "max", max_opts);
    let (c, s) = (12, 4);
    for (m, x) in mean.iter().zip(&max) {
        let len = m.len();
        for t in 0..len {
            // coverage: number of suspect windows over t (stride 1, last window at len - L)
            let covering = (0..=len - c - s).filter(|&st| st + c <= t && t < st + c + s).count();
            match covering {
                0 => assert!(m.scores[t].is_none() && x.scores[t].is_none()),
                1 => assert_eq!(m.scores[t], x.scores[t]),
                _ => assert!(x.scores[t].unwrap() >= m.scores[t].unwrap() - 1e-12),
            }
        }
    }

    let warm = ScoreOptions {
        score_warmup: true,
        ..Default::default()
    };
    let (_, padded) = score(dir, &run.checkpoint, "warm", warm);
    assert!(padded.iter().all(|t| t.scores.iter().all(Option::is_some)));

    let data = load_dataset(&dir.join("data")).unwrap();
    let test = data.test.as_ref().unwrap();
    let eval = |threshold: ThresholdSource, mode: EvalMode| {
        cmd_evaluate(&EvaluateArgs {
            traces: mean_dir.clone(),
            dataset: dir.join("data"),
            split: Split::Test,
            threshold,
            mode,
            output: Some(dir.join("eval.json")),
            save_threshold: Some(dir.join("threshold.json")),
        })
        .unwrap()
    };
    let adjusted = eval(ThresholdSource::Test, EvalMode::Adjusted);
    assert_eq!(adjusted, select_threshold(&mean, test, EvalMode::Adjusted).unwrap());
    let from_file = eval(ThresholdSource::File(dir.join("threshold.json")), EvalMode::Adjusted);
    assert_eq!(from_file.f1, adjusted.f1);
    assert_eq!(from_file.threshold, adjusted.threshold);
    let pointwise = eval(ThresholdSource::Test, EvalMode::Pointwise);
    assert!(adjusted.f1 >= pointwise.f1);
}

#[test]
fn perfect_traces_score_one() {
    let dir = tempfile::tempdir().unwrap();
    smoke_dataset(dir.path());
    let data = load_dataset(&dir.path().join("data")).unwrap();
    let test = data.test.as_ref().unwrap();
    let traces: Vec<_> = test
        .series()
        .iter()
        .map(|s| contextad::detector::ScoreTrace {
            series_id: s.id().to_string(),
            scores: s.labels().iter().map(|l| Some(if l.is_anomalous() { 1.0 } else { 0.0 })).collect(),
            probabilities: vec![Some(0.5); s.len()],
            aggregation: Aggregation::Mean,
        })
        .collect();
    let tdir = dir.path().join("traces");
    write_traces(&tdir, &traces, test, Aggregation::Mean).unwrap();
    for mode in [EvalMode::Adjusted, EvalMode::Pointwise] {
        let r = cmd_evaluate(&EvaluateArgs {
            traces: tdir.clone(),
            dataset: dir.path().join("data"),
            split: Split::Test,
            threshold: ThresholdSource::Test,
            mode,
            output: None,
            save_threshold: None,
        })
        .unwrap();
        assert_eq!(r.f1, 1.0);
    }
}

#[test]
fn inject_plumbing() {
    let dir = tempfile::tempdir().unwrap();
    smoke_dataset(dir.path());
    let run = |po_count: usize, seed: u64, name: &str| {
        let out = dir.path().join(name);
        cmd_inject(&InjectArgs {
            dataset: dir.path().join("data"),
            split: Split::Train,
            augment: None,
            po_count: Some(po_count),
            seed,
            output: out.clone(),
        })
        .unwrap();
        load_dataset(&out).unwrap()
    };
    let original = load_dataset(&dir.path().join("data")).unwrap();
    assert_eq!(run(0, 3, "none"), original);

    let a = run(3, 3, "a");
    assert_eq!(a, run(3, 3, "b"));
    assert_ne!(a, run(3, 4, "c"));
    assert_eq!(a.test, original.test);
    for (s, o) in a.train.as_ref().unwrap().series().iter().zip(original.train.as_ref().unwrap().series()) {
        let changed: Vec<usize> = (0..s.len()).filter(|&t| s.values()[t] != o.values()[t]).collect();
        assert!(!changed.is_empty() && changed.len() <= 3);
        for t in 0..s.len() {
            assert_eq!(s.labels()[t] == LabelState::Anomalous, changed.contains(&t));
        }
    }
}

#[test]
fn synth_writes_cells_with_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let suite = dir.path().join("suite.toml");
    fs::write(&suite, "train_series = 2\ntest_series = 2\nlength = 400\nanomalies_per_series = 2\n").unwrap();
    let dirs = cmd_synth(&SynthArgs {
        widths: vec![0.0, 2.0],
        seeds: vec![5],
        config: Some(suite),
        output: dir.path().join("synth"),
    })
    .unwrap();
    assert_eq!(dirs.len(), 2);
    assert!(dirs[0].ends_with("width0-seed5"));
    for d in &dirs {
        assert!(d.join("provenance.json").is_file());
        let data = load_dataset(d).unwrap();
        assert_eq!(data.test.as_ref().unwrap().len(), 2);
        assert!(!data.train.as_ref().unwrap().has_labeled_anomalies());
    }
}

const BENCH_TOML: &str = r#"
name = "tiny"
seeds = [0, 1]
output_dir = "bench"

[data]
kind = "width-suite"
widths = [0.0, 2.0]

[data.suite]
train_series = 2
test_series = 2
length = 400
anomalies_per_series = 2

[train]
series_per_batch = 2
crops_per_series = 2
epochs = 1
batches_per_epoch = 3

[train.window]
context_length = 10
suspect_length = 2

[train.encoder]
input_channels = 1
num_blocks = 2
hidden_channels = 4
embedding_dim = 4

[train.augment]
po_count_per_series = 3
coe_rate = 0.5

[search]
method = "grid"
space = { "augment.mixup_rate" = [0.0, 1.0] }

[evaluation]
stride = 2
"#;

#[test]
fn bench_aggregates_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.toml");
    fs::write(&path, BENCH_TOML).unwrap();
    let cfg = BenchConfig::load(&path).unwrap();
    assert_eq!(cfg.candidates().len(), 2);
    let summary = run_bench(&cfg, 2).unwrap();
    assert_eq!(summary.cells.len(), 4);
    // 2 candidates x 2 widths x 2 modes
    assert_eq!(summary.rows.len(), 8);
    for row in &summary.rows {
        assert_eq!(row.f1.n, 2);
        assert!(row.f1.std >= 0.0);
    }
    let out = dir.path().join("bench");
    assert!(out.join(SUMMARY_JSON).is_file());
    assert!(fs::read_to_string(out.join(SUMMARY_TXT)).unwrap().contains(" ± "));

    // drop one cell; a rerun recomputes it and reuses the rest
    let cells = out.join(CELLS_DIR);
    let kept = cells.join("c0-seed0.json");
    let stamp = fs::read(&kept).unwrap();
    fs::remove_file(cells.join("c1-seed1.json")).unwrap();
    let again = run_bench(&cfg, 1).unwrap();
    assert_eq!(fs::read(&kept).unwrap(), stamp);
    assert!(cells.join("c1-seed1.json").is_file());
    let f1s = |s: &contextad_cli::bench::BenchSummary| s.rows.iter().map(|r| r.f1.mean).collect::<Vec<_>>();
    assert_eq!(f1s(&summary), f1s(&again));
}

#[test]
fn bench_config_rejects_unknown_fields() {
    let text = BENCH_TOML.replace("name = \"tiny\"", "name = \"tiny\"\nbogus = 1");
    assert!(parse_text::<BenchConfig>(&text, Path::new("b.toml")).is_err());
}

#[test]
fn binary_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_contextad");
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, "dataset = \"x\"\n").unwrap();
    let out = Command::new(exe).arg("train").arg(&config).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config error"));

    fs::write(&config, RUN_TOML.replace("dataset = \"data\"", "dataset = \"nowhere\"")).unwrap();
    let out = Command::new(exe).arg("train").arg(&config).output().unwrap();
    assert_eq!(out.status.code(), Some(3));

    let status = Command::new(exe).arg("--help").output().unwrap();
    let help = String::from_utf8_lossy(&status.stdout);
    for sub in ["train", "score", "evaluate", "inject", "bench", "synth", "convert"] {
        assert!(help.contains(sub), "{sub}");
    }
}
