//! Multi-seed benchmark suites with grid or random hyperparameter search.
//!
//! Every (candidate, seed) cell trains once and is evaluated on each test set of the suite.
//! Finished cells are written to `cells/` and skipped on rerun, so an interrupted suite
//! resumes where it stopped.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use contextad::detector::Aggregation;
use contextad::evalkit::{evaluate_dataset, select_threshold, EvalMode, EvalResult};
use contextad::series::{Dataset, Split};
use contextad::synthgen::{make_width_suite, SuiteConfig};
use contextad::trainer::TrainConfig;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::commands::{train_model, ScoreOptions};
use crate::config::{parse_file, with_overrides, Standardize};
use crate::error::{CliError, CliResult};
use crate::io::{load_dataset, read_json, write_json, SplitDatasets};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum BenchData {
    /// A canonical dataset on disk; trains on `train`, evaluates on `test`.
    Dataset { path: PathBuf },
    /// Synthetic sine suite regenerated per seed; evaluates every width.
    WidthSuite {
        widths: Vec<f64>,
        #[serde(default)]
        suite: SuiteConfig,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BenchThreshold {
    /// Best-F1 threshold on the test traces.
    #[default]
    Test,
    /// Best-F1 threshold on the validation split.
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub modes: Vec<EvalMode>,
    pub aggregation: Aggregation,
    pub stride: Option<usize>,
    pub score_warmup: bool,
    pub threshold_from: BenchThreshold,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            modes: vec![EvalMode::Adjusted, EvalMode::Pointwise],
            aggregation: Aggregation::Mean,
            stride: None,
            score_warmup: false,
            threshold_from: BenchThreshold::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method")]
pub enum SearchMethod {
    Grid,
    Random { samples: usize, seed: u64 },
}

/// Search space: dotted training-config paths and the values each may take.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    #[serde(flatten)]
    pub method: SearchMethod,
    pub space: BTreeMap<String, Vec<Value>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub name: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub data: BenchData,
    #[serde(default)]
    pub standardize: Standardize,
    pub train: TrainConfig,
    #[serde(default)]
    pub search: Option<SearchConfig>,
    #[serde(default)]
    pub evaluation: EvalSettings,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("bench")
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl BenchConfig {
    /// Loads a suite config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let mut cfg: BenchConfig = parse_file(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.output_dir = base.join(&cfg.output_dir);
        if let BenchData::Dataset { path } = &mut cfg.data {
            *path = base.join(&*path);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("`seeds` is empty".into()));
        }
        if self.evaluation.modes.is_empty() {
            return Err(CliError::Config("`evaluation.modes` is empty".into()));
        }
        if let BenchData::WidthSuite { widths, suite } = &self.data {
            if widths.is_empty() {
                return Err(CliError::Config("`data.widths` is empty".into()));
            }
            suite.validate()?;
        }
        for candidate in self.candidates() {
            with_overrides(&self.train, &candidate)?;
        }
        Ok(())
    }

    /// Override sets to evaluate; a single empty set without a search section.
    pub fn candidates(&self) -> Vec<Vec<(String, Value)>> {
        let Some(search) = &self.search else {
            return vec![Vec::new()];
        };
        let grid = grid(&search.space);
        match search.method {
            SearchMethod::Grid => grid,
            SearchMethod::Random { samples, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut picked = grid;
                picked.shuffle(&mut rng);
                picked.truncate(samples);
                picked
            }
        }
    }
}

/// Cartesian product of the search space, in key order.
pub fn grid(space: &BTreeMap<String, Vec<Value>>) -> Vec<Vec<(String, Value)>> {
    let mut out = vec![Vec::new()];
    for (key, values) in space {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut next = prefix.clone();
                    next.push((key.clone(), v.clone()));
                    next
                })
            })
            .collect();
    }
    out
}

/// One evaluation of a trained cell on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetric {
    /// `test` for datasets, `width<w>` for the width suite.
    pub target: String,
    pub result: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub candidate: usize,
    pub seed: u64,
    pub overrides: Vec<(String, Value)>,
    pub final_train_loss: Option<f64>,
    pub train_secs: f64,
    pub score_secs: f64,
    pub metrics: Vec<CellMetric>,
}

/// Mean and population standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self { mean, std: var.sqrt(), n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub candidate: usize,
    pub overrides: Vec<(String, Value)>,
    pub target: String,
    pub mode: EvalMode,
    pub f1: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub name: String,
    pub rows: Vec<SummaryRow>,
    pub cells: Vec<CellResult>,
}

impl BenchSummary {
    pub fn row(&self, candidate: usize, target: &str, mode: EvalMode) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.candidate == candidate && r.target == target && r.mode == mode)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{}\n", self.name);
        let _ = writeln!(out, "{:<4} {:<10} {:<10} {:>18} {:>18} {:>18}  overrides", "cand", "target", "mode", "f1", "precision", "recall");
        for r in &self.rows {
            let fmt = |m: MeanStd| format!("{:.4} ± {:.4}", m.mean, m.std);
            let overrides: Vec<String> = r.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let _ = writeln!(
                out,
                "{:<4} {:<10} {:<10} {:>18} {:>18} {:>18}  {}",
                r.candidate,
                r.target,
                r.mode.to_string(),
                fmt(r.f1),
                fmt(r.precision),
                fmt(r.recall),
                overrides.join(" ")
            );
        }
        out
    }
}

fn summarize(name: &str, cells: Vec<CellResult>) -> BenchSummary {
    let mut rows: Vec<SummaryRow> = Vec::new();
    let mut groups: BTreeMap<(usize, String, String), Vec<&EvalResult>> = BTreeMap::new();
    let mut order = Vec::new();
    for cell in &cells {
        for m in &cell.metrics {
            let key = (cell.candidate, m.target.clone(), m.result.mode.to_string());
            if !groups.contains_key(&key) {
                order.push((key.clone(), cell.overrides.clone(), m.result.mode));
            }
            groups.entry(key).or_default().push(&m.result);
        }
    }
    for (key, overrides, mode) in order {
        let results = &groups[&key];
        let pick = |f: fn(&EvalResult) -> f64| MeanStd::of(&results.iter().map(|r| f(r)).collect::<Vec<_>>());
        rows.push(SummaryRow {
            candidate: key.0,
            overrides,
            target: key.1.clone(),
            mode,
            f1: pick(|r| r.f1),
            precision: pick(|r| r.precision),
            recall: pick(|r| r.recall),
        });
    }
    BenchSummary {
        name: name.to_string(),
        rows,
        cells,
    }
}

pub const CELLS_DIR: &str = "cells";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_TXT: &str = "summary.txt";

pub fn cell_file_name(candidate: usize, seed: u64) -> String {
    format!("c{candidate}-seed{seed}.json")
}

/// Train/test sets of one seed, each test set tagged by target name.
struct SeedData {
    train: Dataset,
    validation: Option<Dataset>,
    targets: Vec<(String, Dataset)>,
}

fn width_label(width: f64) -> String {
    format!("width{width}")
}

fn seed_data(data: &BenchData, seed: u64, cached: Option<&SplitDatasets>) -> CliResult<SeedData> {
    match data {
        BenchData::Dataset { .. } => {
            let d = cached.expect("dataset loaded up front");
            Ok(SeedData {
                train: d.require(Split::Train)?.clone(),
                validation: d.validation.clone(),
                targets: vec![("test".to_string(), d.require(Split::Test)?.clone())],
            })
        }
        BenchData::WidthSuite { widths, suite } => {
            let cells = make_width_suite(widths, &[seed], suite)?;
            let train = cells[0].train.clone();
            let targets = cells.into_iter().map(|c| (width_label(c.width), c.test)).collect();
            Ok(SeedData {
                train,
                validation: None,
                targets,
            })
        }
    }
}

fn run_cell(
    cfg: &BenchConfig,
    candidate: usize,
    overrides: &[(String, Value)],
    seed: u64,
    data: &SeedData,
) -> CliResult<CellResult> {
    let mut overrides = overrides.to_vec();
    overrides.push(("seed".to_string(), Value::from(seed)));
    let train_cfg = with_overrides(&cfg.train, &overrides)?;
    overrides.pop();

    let started = Instant::now();
    let (model, report) = train_model(&data.train, data.validation.as_ref(), &train_cfg, cfg.standardize, None)?;
    let train_secs = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let options = ScoreOptions {
        aggregation: cfg.evaluation.aggregation,
        stride: cfg.evaluation.stride,
        score_warmup: cfg.evaluation.score_warmup,
    };
    let val_traces = match (cfg.evaluation.threshold_from, &data.validation) {
        (BenchThreshold::Validation, Some(val)) => Some(model.score(val, &options)?),
        (BenchThreshold::Validation, None) => {
            return Err(CliError::Config("threshold_from = validation needs a validation split".into()))
        }
        (BenchThreshold::Test, _) => None,
    };
    let mut metrics = Vec::new();
    for (target, test) in &data.targets {
        let traces = model.score(test, &options)?;
        for &mode in &cfg.evaluation.modes {
            let result = match (&val_traces, &data.validation) {
                (Some(vt), Some(val)) => {
                    let t = select_threshold(vt, val, mode)?
                        .threshold
                        .ok_or_else(|| CliError::Data("validation traces are empty".into()))?;
                    evaluate_dataset(&traces, test, t, mode)?
                }
                _ => select_threshold(&traces, test, mode)?,
            };
            log::info!("cell c{candidate}-seed{seed} {target} {mode}: f1 {:.4}", result.f1);
            metrics.push(CellMetric {
                target: target.clone(),
                result,
            });
        }
    }
    Ok(CellResult {
        candidate,
        seed,
        overrides,
        final_train_loss: report.epochs.last().map(|e| e.train_loss),
        train_secs,
        score_secs: started.elapsed().as_secs_f64(),
        metrics,
    })
}

#[derive(Debug, Clone)]
pub struct BenchArgs {
    pub config: PathBuf,
    /// Worker threads; cells are independent.
    pub jobs: usize,
    pub output_dir: Option<PathBuf>,
}

pub fn cmd_bench(args: &BenchArgs) -> CliResult<BenchSummary> {
    let mut cfg = BenchConfig::load(&args.config)?;
    if let Some(dir) = &args.output_dir {
        cfg.output_dir = dir.clone();
    }
    run_bench(&cfg, args.jobs)
}

/// Runs (or resumes) every cell of a suite and writes the summary.
pub fn run_bench(cfg: &BenchConfig, jobs: usize) -> CliResult<BenchSummary> {
    cfg.validate()?;
    let cells_dir = cfg.output_dir.join(CELLS_DIR);
    fs::create_dir_all(&cells_dir).map_err(|e| CliError::io(&cells_dir, e))?;
    let cached = match &cfg.data {
        BenchData::Dataset { path } => Some(load_dataset(path)?),
        BenchData::WidthSuite { .. } => None,
    };
    let candidates = cfg.candidates();
    let work: Vec<(usize, u64)> = (0..candidates.len())
        .flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; work.len()]);
    let failure: Mutex<Option<CliError>> = Mutex::new(None);

    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= work.len() || failure.lock().unwrap().is_some() {
            return;
        }
        let (candidate, seed) = work[i];
        let path = cells_dir.join(cell_file_name(candidate, seed));
        let outcome = match read_json::<CellResult>(&path) {
            Ok(done) if path.exists() => {
                log::info!("reusing {}", path.display());
                Ok(done)
            }
            _ => seed_data(&cfg.data, seed, cached.as_ref())
                .and_then(|data| run_cell(cfg, candidate, &candidates[candidate], seed, &data))
                .and_then(|cell| write_json(&path, &cell).map(|_| cell)),
        };
        match outcome {
            Ok(cell) => results.lock().unwrap()[i] = Some(cell),
            Err(e) => {
                failure.lock().unwrap().get_or_insert(e);
                return;
            }
        }
    };
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1) {
            scope.spawn(worker);
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let cells: Vec<CellResult> = results.into_inner().unwrap().into_iter().flatten().collect();
    let summary = summarize(&cfg.name, cells);
    write_json(&cfg.output_dir.join(SUMMARY_JSON), &summary)?;
    let txt = cfg.output_dir.join(SUMMARY_TXT);
    fs::write(&txt, summary.to_table()).map_err(|e| CliError::io(&txt, e))?;
    Ok(summary)
}
