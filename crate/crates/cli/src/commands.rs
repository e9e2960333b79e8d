//! Subcommand implementations. Each takes plain arguments and returns what it wrote, so the
//! binary and the tests drive the same code.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use contextad::augment::{inject_dataset, AugmentConfig};
use contextad::detector::{Aggregation, Detector, ScoreTrace};
use contextad::encoder::Encoder;
use contextad::evalkit::{evaluate_dataset, select_threshold, EvalMode, EvalResult};
use contextad::nn::checkpoint::{read_checkpoint, write_checkpoint};
use contextad::nn::ParameterSet;
use contextad::series::{fit_standardizer, standardize, Dataset, Split, StandardizationStats};
use contextad::synthgen::{make_width_suite, SuiteConfig};
use contextad::trainer::{fit, TrainConfig, TrainReport};
use contextad::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{convert, ConvertOptions, Format};
use crate::config::{parse_file, run_dir_name, RunConfig, Standardize};
use crate::error::{CliError, CliResult};
use crate::io::{load_dataset, read_json, read_traces, write_dataset, write_json, write_traces, SplitDatasets};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";
pub const NONFINITE_DUMP_FILE: &str = "nonfinite_batch.json";

/// Same stream the trainer injects with, so `inject` shows exactly what training sees.
const INJECT_STREAM: u64 = 1;

/// Metadata stored next to the parameters in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub train: TrainConfig,
    pub standardization: Option<StandardizationStats>,
}

/// A loaded checkpoint, ready to score.
pub struct Model {
    pub detector: Detector,
    pub meta: ModelMeta,
}

impl Model {
    pub fn new(params: ParameterSet, meta: ModelMeta) -> CliResult<Self> {
        let encoder = Encoder::new(meta.train.encoder.clone())?;
        let detector = Detector::new(encoder, params, meta.train.detector.clone())?;
        Ok(Self { detector, meta })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let file = File::open(path).map_err(|e| CliError::io(path, e))?;
        let (params, meta) = read_checkpoint(BufReader::new(file))?;
        let meta: ModelMeta =
            serde_json::from_value(meta).map_err(|e| CliError::Data(format!("{}: bad metadata: {e}", path.display())))?;
        Self::new(params, meta)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let meta = serde_json::to_value(&self.meta).map_err(|e| CliError::Data(e.to_string()))?;
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut out = BufWriter::new(file);
        write_checkpoint(&mut out, self.detector.params(), &meta)?;
        out.flush().map_err(|e| CliError::io(path, e))
    }

    /// Applies the training-set standardization, if any.
    pub fn prepare(&self, dataset: &Dataset) -> CliResult<Dataset> {
        standardize_dataset(dataset, self.meta.standardization.as_ref())
    }

    /// Scores every series of `dataset` (raw values; standardization is applied here).
    pub fn score(&self, dataset: &Dataset, options: &ScoreOptions) -> CliResult<Vec<ScoreTrace>> {
        let prepared = self.prepare(dataset)?;
        let spec = self.meta.train.window.with_stride(options.stride.unwrap_or(self.meta.train.window.stride));
        prepared
            .series()
            .iter()
            .map(|s| {
                let trace = if options.score_warmup {
                    self.detector.rolling_score_padded(s, spec, options.aggregation)
                } else {
                    self.detector.rolling_score(s, spec, options.aggregation)
                };
                trace.map_err(CliError::from)
            })
            .collect()
    }
}

pub fn standardize_dataset(dataset: &Dataset, stats: Option<&StandardizationStats>) -> CliResult<Dataset> {
    let Some(stats) = stats else {
        return Ok(dataset.clone());
    };
    let series = dataset
        .series()
        .iter()
        .map(|s| standardize(s, stats))
        .collect::<contextad::Result<Vec<_>>>()?;
    Ok(Dataset::new(dataset.split(), series)?)
}

/// Fits standardization on `train` and trains; returns the model and its report.
///
/// On a non-finite loss the offending batch is written to `dump_dir`, when given.
pub fn train_model(
    train: &Dataset,
    validation: Option<&Dataset>,
    config: &TrainConfig,
    method: Standardize,
    dump_dir: Option<&Path>,
) -> CliResult<(Model, TrainReport)> {
    let stats = match method.method() {
        Some(m) => Some(fit_standardizer(train, m)?),
        None => None,
    };
    let train_std = standardize_dataset(train, stats.as_ref())?;
    let val_std = validation.map(|v| standardize_dataset(v, stats.as_ref())).transpose()?;
    let (params, report) = match fit(&train_std, val_std.as_ref(), config) {
        Ok(out) => out,
        Err(Error::NonFiniteLoss { epoch, step, batch_dump }) => {
            let mut msg = format!("non-finite training loss at epoch {epoch}, step {step}");
            if let Some(dir) = dump_dir {
                let path = dir.join(NONFINITE_DUMP_FILE);
                fs::write(&path, batch_dump).map_err(|e| CliError::io(&path, e))?;
                msg.push_str(&format!("; batch written to {}", path.display()));
            }
            return Err(CliError::Numeric(msg));
        }
        Err(e) => return Err(e.into()),
    };
    let meta = ModelMeta {
        train: config.clone(),
        standardization: stats,
    };
    Ok((Model::new(params, meta)?, report))
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    /// Overrides `output_dir` from the config.
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub report: TrainReport,
}

/// Trains from a run config into `<output_dir>/<hash>-seed<seed>/`.
pub fn cmd_train(args: &TrainArgs) -> CliResult<TrainOutcome> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(dir) = &args.output_dir {
        cfg.output_dir = dir.clone();
    }
    let data = load_dataset(&cfg.dataset)?;
    let train = data.require(Split::Train)?;
    let run_dir = cfg.output_dir.join(run_dir_name(&cfg.train)?);
    fs::create_dir_all(&run_dir).map_err(|e| CliError::io(&run_dir, e))?;
    write_json(&run_dir.join(RESOLVED_CONFIG_FILE), &cfg)?;
    log::info!("training on {} series into {}", train.len(), run_dir.display());

    let (model, report) = train_model(train, data.validation.as_ref(), &cfg.train, cfg.standardize, Some(&run_dir))?;
    let checkpoint = run_dir.join(CHECKPOINT_FILE);
    model.save(&checkpoint)?;
    write_json(&run_dir.join(REPORT_FILE), &report)?;
    Ok(TrainOutcome {
        run_dir,
        checkpoint,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScoreOptions {
    pub aggregation: Aggregation,
    /// Defaults to the stride the model was trained with.
    pub stride: Option<usize>,
    /// Left-pad by the context length so the first timesteps are scored too.
    pub score_warmup: bool,
}

#[derive(Debug, Clone)]
pub struct ScoreArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub split: Split,
    pub output: PathBuf,
    pub options: ScoreOptions,
}

/// Writes one trace CSV per series of the chosen split, plus the trace index.
pub fn cmd_score(args: &ScoreArgs) -> CliResult<Vec<ScoreTrace>> {
    let model = Model::load(&args.checkpoint)?;
    let data = load_dataset(&args.dataset)?;
    let dataset = data.require(args.split)?;
    let traces = model.score(dataset, &args.options)?;
    write_traces(&args.output, &traces, dataset, args.options.aggregation)?;
    Ok(traces)
}

/// Where the decision threshold comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ThresholdSource {
    /// Best-F1 threshold on the evaluated traces themselves.
    Test,
    /// Best-F1 threshold on validation traces, scored against the validation split.
    Validation { traces: PathBuf },
    /// A JSON file `{"threshold": t}`.
    File(PathBuf),
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFile {
    pub threshold: f64,
}

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub traces: PathBuf,
    pub dataset: PathBuf,
    pub split: Split,
    pub threshold: ThresholdSource,
    pub mode: EvalMode,
    pub output: Option<PathBuf>,
    pub save_threshold: Option<PathBuf>,
}

/// Threshold from `source` for the given evaluation mode.
pub fn resolve_threshold(
    source: &ThresholdSource,
    data: &SplitDatasets,
    test_traces: &[ScoreTrace],
    test: &Dataset,
    mode: EvalMode,
) -> CliResult<f64> {
    let picked = match source {
        ThresholdSource::Test => select_threshold(test_traces, test, mode)?.threshold,
        ThresholdSource::Validation { traces } => {
            let val = data.require(Split::Validation)?;
            select_threshold(&read_traces(traces)?, val, mode)?.threshold
        }
        ThresholdSource::File(path) => Some(read_json::<ThresholdFile>(path)?.threshold),
        ThresholdSource::Fixed(t) => Some(*t),
    };
    picked.ok_or_else(|| CliError::Data("no scored points to pick a threshold from".into()))
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> CliResult<EvalResult> {
    let data = load_dataset(&args.dataset)?;
    let dataset = data.require(args.split)?;
    let traces = read_traces(&args.traces)?;
    let result = match args.threshold {
        ThresholdSource::Test => select_threshold(&traces, dataset, args.mode)?,
        ref source => {
            let t = resolve_threshold(source, &data, &traces, dataset, args.mode)?;
            evaluate_dataset(&traces, dataset, t, args.mode)?
        }
    };
    if let Some(path) = &args.output {
        write_json(path, &result)?;
    }
    if let (Some(path), Some(threshold)) = (&args.save_threshold, result.threshold) {
        write_json(path, &ThresholdFile { threshold })?;
    }
    Ok(result)
}

#[derive(Debug, Clone)]
pub struct InjectArgs {
    pub dataset: PathBuf,
    pub split: Split,
    /// TOML or JSON augmentation settings; defaults when absent.
    pub augment: Option<PathBuf>,
    pub po_count: Option<usize>,
    pub seed: u64,
    pub output: PathBuf,
}

/// Injects point outliers (and slopes) into one split; other splits are copied unchanged.
pub fn cmd_inject(args: &InjectArgs) -> CliResult<PathBuf> {
    let mut augment: AugmentConfig = match &args.augment {
        Some(path) => parse_file(path)?,
        None => AugmentConfig::default(),
    };
    if let Some(n) = args.po_count {
        augment.po_count_per_series = n;
    }
    augment.validate()?;
    let mut data = load_dataset(&args.dataset)?;
    let source = data.require(args.split)?;
    let imputed = Dataset::new(source.split(), source.series().iter().cloned().map(|s| s.imputed()).collect())?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    rng.set_stream(INJECT_STREAM);
    let injected = inject_dataset(&imputed, &augment, &mut rng)?;
    match args.split {
        Split::Train => data.train = Some(injected),
        Split::Validation => data.validation = Some(injected),
        Split::Test => data.test = Some(injected),
    }
    write_dataset(&args.output, &data)
}

#[derive(Debug, Clone)]
pub struct SynthArgs {
    pub widths: Vec<f64>,
    pub seeds: Vec<u64>,
    /// TOML or JSON suite settings; defaults when absent.
    pub config: Option<PathBuf>,
    pub output: PathBuf,
}

pub const PROVENANCE_FILE: &str = "provenance.json";

/// Name of a width-suite cell directory.
pub fn cell_dir_name(width: f64, seed: u64) -> String {
    format!("width{width}-seed{seed}")
}

/// Writes one dataset directory per (width, seed) with its provenance.
pub fn cmd_synth(args: &SynthArgs) -> CliResult<Vec<PathBuf>> {
    let suite: SuiteConfig = match &args.config {
        Some(path) => parse_file(path)?,
        None => SuiteConfig::default(),
    };
    let cells = make_width_suite(&args.widths, &args.seeds, &suite)?;
    let mut dirs = Vec::with_capacity(cells.len());
    for cell in cells {
        let dir = args.output.join(cell_dir_name(cell.width, cell.seed));
        let name = cell_dir_name(cell.width, cell.seed);
        write_dataset(&dir, &SplitDatasets::from_datasets(name, vec![cell.train, cell.test])?)?;
        write_json(&dir.join(PROVENANCE_FILE), &cell.provenance)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

#[derive(Debug, Clone)]
pub struct ConvertArgs {
    pub format: Format,
    pub input: PathBuf,
    pub output: PathBuf,
    pub options: ConvertOptions,
}

pub fn cmd_convert(args: &ConvertArgs) -> CliResult<PathBuf> {
    let data = convert(args.format, &args.input, &args.options)?;
    write_dataset(&args.output, &data)
}
