use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use contextad::detector::Aggregation;
use contextad::evalkit::EvalMode;
use contextad::series::Split;
use contextad_cli::adapters::{ConvertOptions, Format};
use contextad_cli::bench::{cmd_bench, BenchArgs};
use contextad_cli::commands::{
    cmd_convert, cmd_evaluate, cmd_inject, cmd_score, cmd_synth, cmd_train, ConvertArgs, EvaluateArgs, InjectArgs,
    ScoreArgs, ScoreOptions, SynthArgs, ThresholdSource, TrainArgs,
};
use contextad_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "contextad", version, about = "Contextual anomaly detection for time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config.
    Train {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Score a dataset split with a checkpoint; writes one trace CSV per series.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = AggregationArg::Mean)]
        aggregation: AggregationArg,
        /// Defaults to the stride in the checkpoint's window spec.
        #[arg(long)]
        stride: Option<usize>,
        /// Pad the start so warm-up timesteps get scores.
        #[arg(long)]
        score_warmup: bool,
    },
    /// Compute precision / recall / F1 from traces.
    Evaluate(EvaluateCli),
    /// Inject point outliers and slopes into one split.
    Inject {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        /// TOML/JSON augmentation settings.
        #[arg(long)]
        augment: Option<PathBuf>,
        #[arg(long)]
        po_count: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Run a multi-seed suite, with optional hyperparameter search.
    Bench {
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Generate the synthetic sine width suite.
    Synth {
        #[arg(long, value_delimiter = ',', default_value = "0,2,4")]
        widths: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// TOML/JSON suite settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Convert a public benchmark dump into the canonical layout.
    Convert {
        #[arg(value_enum)]
        format: Format,
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// NASA: keep only SMAP or MSL channels.
        #[arg(long)]
        spacecraft: Option<String>,
        /// KPI: split tag of the input file.
        #[arg(long, value_enum)]
        kpi_split: Option<SplitArg>,
        /// KPI: an extra file tagged as test.
        #[arg(long)]
        kpi_test_file: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EvaluateCli {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, value_enum, default_value_t = ThresholdFrom::Test)]
    threshold_from: ThresholdFrom,
    /// Validation traces, for `--threshold-from val`.
    #[arg(long)]
    val_traces: Option<PathBuf>,
    /// `{"threshold": t}` file, for `--threshold-from file`.
    #[arg(long)]
    threshold_file: Option<PathBuf>,
    /// Fixed threshold; overrides `--threshold-from`.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_enum, default_value_t = ModeArg::Adjusted)]
    mode: ModeArg,
    /// Write the result as JSON here.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long)]
    save_threshold: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    #[value(alias = "val")]
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    Mean,
    #[value(alias = "max-first-alert")]
    Max,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::Mean => Aggregation::Mean,
            AggregationArg::Max => Aggregation::MaxFirstAlert,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Adjusted,
    Pointwise,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Adjusted => EvalMode::Adjusted,
            ModeArg::Pointwise => EvalMode::Pointwise,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ThresholdFrom {
    Val,
    Test,
    File,
}

fn threshold_source(args: &EvaluateCli) -> CliResult<ThresholdSource> {
    if let Some(t) = args.threshold {
        return Ok(ThresholdSource::Fixed(t));
    }
    match args.threshold_from {
        ThresholdFrom::Test => Ok(ThresholdSource::Test),
        ThresholdFrom::Val => args
            .val_traces
            .clone()
            .map(|traces| ThresholdSource::Validation { traces })
            .ok_or_else(|| CliError::Config("--threshold-from val needs --val-traces".into())),
        ThresholdFrom::File => args
            .threshold_file
            .clone()
            .map(ThresholdSource::File)
            .ok_or_else(|| CliError::Config("--threshold-from file needs --threshold-file".into())),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config, seed, output_dir } => {
            let out = cmd_train(&TrainArgs { config, seed, output_dir })?;
            println!("{}", out.checkpoint.display());
        }
        Command::Score {
            checkpoint,
            dataset,
            split,
            output,
            aggregation,
            stride,
            score_warmup,
        } => {
            let traces = cmd_score(&ScoreArgs {
                checkpoint,
                dataset,
                split: split.into(),
                output: output.clone(),
                options: ScoreOptions {
                    aggregation: aggregation.into(),
                    stride,
                    score_warmup,
                },
            })?;
            println!("{} traces written to {}", traces.len(), output.display());
        }
        Command::Evaluate(args) => {
            let threshold = threshold_source(&args)?;
            let result = cmd_evaluate(&EvaluateArgs {
                traces: args.traces,
                dataset: args.dataset,
                split: args.split.into(),
                threshold,
                mode: args.mode.into(),
                output: args.output,
                save_threshold: args.save_threshold,
            })?;
            print!("{}", result.to_table());
        }
        Command::Inject {
            dataset,
            split,
            augment,
            po_count,
            seed,
            output,
        } => {
            let manifest = cmd_inject(&InjectArgs {
                dataset,
                split: split.into(),
                augment,
                po_count,
                seed,
                output,
            })?;
            println!("{}", manifest.display());
        }
        Command::Bench { config, jobs, output_dir } => {
            let summary = cmd_bench(&BenchArgs { config, jobs, output_dir })?;
            print!("{}", summary.to_table());
        }
        Command::Synth {
            widths,
            seeds,
            config,
            output,
        } => {
            for dir in cmd_synth(&SynthArgs {
                widths,
                seeds,
                config,
                output,
            })? {
                println!("{}", dir.display());
            }
        }
        Command::Convert {
            format,
            input,
            output,
            spacecraft,
            kpi_split,
            kpi_test_file,
        } => {
            let manifest = cmd_convert(&ConvertArgs {
                format,
                input,
                output,
                options: ConvertOptions {
                    spacecraft,
                    kpi_split: kpi_split.map(Into::into),
                    kpi_test_file,
                },
            })?;
            println!("{}", manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
