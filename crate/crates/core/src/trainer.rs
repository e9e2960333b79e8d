//! Minibatch assembly, the optimization loop, and validation-driven model selection.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{coe_augment_n, inject_dataset, mixup_augment_n, AugmentConfig};
use crate::detector::{loss_weights, Aggregation, Detector, DetectorConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::evalkit::{select_threshold, EvalMode};
use crate::nn::{clip_global_norm, Graph, OptimizerConfig, OptimizerState, ParameterSet};
use crate::series::{random_crops, Dataset, LabelState, UnlabeledPolicy, Window, WindowSpec};

/// Independent random streams derived from the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_INJECT: u64 = 1;
const STREAM_BATCHES: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStoppingConfig {
    pub enabled: bool,
    /// Non-improving epochs tolerated before stopping.
    pub patience: usize,
}

impl Default for EarlyStoppingConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            patience: 3,
        }
    }
}

/// Full training run description. `window` and `encoder` have no defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub window: WindowSpec,
    pub encoder: EncoderConfig,
    /// Series sampled per batch (`b_s`).
    #[serde(default = "defaults::series_per_batch")]
    pub series_per_batch: usize,
    /// Crops per sampled series (`b_c`).
    #[serde(default = "defaults::crops_per_series")]
    pub crops_per_series: usize,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batches_per_epoch")]
    pub batches_per_epoch: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub early_stopping: EarlyStoppingConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub unlabeled_policy: UnlabeledPolicy,
    #[serde(default = "defaults::clip_norm")]
    pub clip_norm: f64,
    /// Aggregation used when scoring the validation split.
    #[serde(default)]
    pub validation_aggregation: Aggregation,
}

mod defaults {
    pub fn series_per_batch() -> usize {
        16
    }
    pub fn crops_per_series() -> usize {
        4
    }
    pub fn epochs() -> usize {
        10
    }
    pub fn batches_per_epoch() -> usize {
        100
    }
    pub fn clip_norm() -> f64 {
        10.0
    }
}

impl TrainConfig {
    /// Config with defaults for everything but the window and encoder.
    pub fn new(window: WindowSpec, encoder: EncoderConfig) -> Self {
        Self {
            window,
            encoder,
            series_per_batch: defaults::series_per_batch(),
            crops_per_series: defaults::crops_per_series(),
            augment: AugmentConfig::default(),
            epochs: defaults::epochs(),
            batches_per_epoch: defaults::batches_per_epoch(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
            early_stopping: EarlyStoppingConfig::default(),
            detector: DetectorConfig::default(),
            unlabeled_policy: UnlabeledPolicy::default(),
            clip_norm: defaults::clip_norm(),
            validation_aggregation: Aggregation::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        self.encoder.validate()?;
        self.augment.validate()?;
        self.optimizer.validate()?;
        let counts = [
            ("series_per_batch", self.series_per_batch),
            ("crops_per_series", self.crops_per_series),
            ("epochs", self.epochs),
            ("batches_per_epoch", self.batches_per_epoch),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        let base = self.base_batch_size();
        if base < 2 && (self.coe_count() > 0 || self.mixup_count() > 0) {
            return Err(Error::BatchTooSmall(base));
        }
        self.detector.center(self.encoder.embedding_dim)?;
        Ok(())
    }

    /// `b_s * b_c`.
    pub fn base_batch_size(&self) -> usize {
        self.series_per_batch * self.crops_per_series
    }

    pub fn coe_count(&self) -> usize {
        augment_count(self.base_batch_size(), self.augment.coe_rate)
    }

    pub fn mixup_count(&self) -> usize {
        augment_count(self.base_batch_size(), self.augment.mixup_rate)
    }

    /// `B = b_s b_c + floor(b_s b_c r_coe) + floor(b_s b_c r_mixup)`.
    pub fn batch_size(&self) -> usize {
        self.base_batch_size() + self.coe_count() + self.mixup_count()
    }
}

/// `floor(base * rate)`.
pub fn augment_count(base: usize, rate: f64) -> usize {
    (base as f64 * rate).floor() as usize
}

/// Crops, then contextual outliers from the crops, then mixup from crops and outliers.
pub fn assemble_batch<R: Rng + ?Sized>(dataset: &Dataset, config: &TrainConfig, rng: &mut R) -> Result<Vec<Window>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut batch = random_crops(
        dataset,
        config.series_per_batch,
        config.crops_per_series,
        config.window,
        config.unlabeled_policy,
        rng,
    )?;
    let coe = coe_augment_n(&batch, config.coe_count(), rng)?;
    batch.extend(coe);
    let mixed = mixup_augment_n(&batch, config.mixup_count(), config.augment.mixup_alpha, rng)?;
    batch.extend(mixed);
    Ok(batch)
}

/// Parameters and optimizer moments carried across epochs.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParameterSet,
    pub optimizer: OptimizerState,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(params: ParameterSet, optimizer: OptimizerConfig) -> Self {
        let optimizer = OptimizerState::new(optimizer, &params);
        Self {
            params,
            optimizer,
            epoch: 0,
        }
    }
}

/// Mean loss and gradients of one batch.
pub fn batch_loss(
    encoder: &Encoder,
    params: &ParameterSet,
    detector: &DetectorConfig,
    batch: &[Window],
) -> Result<(f64, std::collections::BTreeMap<String, crate::nn::Tensor>)> {
    let mut g = Graph::new();
    let bound = encoder.bind(&mut g, params, true)?;
    let exponent = detector.batch_exponent(&mut g, encoder, &bound, batch)?;
    let labels: Vec<f64> = batch.iter().map(Window::label).collect();
    let loss = crate::detector::graph_loss(&mut g, exponent, &labels, &loss_weights(batch))?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    let grads = bound.iter().map(|(name, v)| (name.to_string(), grads.tensor(v))).collect();
    Ok((value, grads))
}

/// `batches_per_epoch` optimizer steps; returns the mean batch loss.
pub fn train_epoch<R: Rng + ?Sized>(
    state: &mut TrainState,
    encoder: &Encoder,
    dataset: &Dataset,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<f64> {
    let epoch = state.epoch + 1;
    let mut total = 0.0;
    for step in 0..config.batches_per_epoch {
        let batch = assemble_batch(dataset, config, rng)?;
        let fail = |batch: &[Window]| Error::NonFiniteLoss {
            epoch,
            step,
            batch_dump: serde_json::to_string(batch).unwrap_or_default(),
        };
        let (loss, mut grads) = match batch_loss(encoder, &state.params, &config.detector, &batch) {
            Ok(out) => out,
            Err(Error::NonFinite(_)) => return Err(fail(&batch)),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(fail(&batch));
        }
        clip_global_norm(&mut grads, config.clip_norm);
        match state.optimizer.step(&mut state.params, &grads) {
            Err(Error::NonFinite(_)) => return Err(fail(&batch)),
            other => other?,
        }
        total += loss;
    }
    state.epoch = epoch;
    Ok(total / config.batches_per_epoch as f64)
}

/// Outcome of recording one validation score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Tracks the best validation F1 and counts non-improving epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    config: EarlyStoppingConfig,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(config: EarlyStoppingConfig) -> Self {
        Self {
            config,
            best: None,
            stale: 0,
        }
    }

    /// Records `f1` for `epoch`; stopping triggers once more than `patience` consecutive
    /// epochs fail to beat the best.
    pub fn observe(&mut self, epoch: usize, f1: f64) -> StopDecision {
        let improved = self.best.map_or(true, |(_, b)| f1 > b);
        if improved {
            self.best = Some((epoch, f1));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision {
            improved,
            stop: self.config.enabled && self.stale > self.config.patience,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_validation_f1: Option<f64>,
    pub stopped_early: bool,
    pub optimizer_steps: u64,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// Copy with the wall-clock time zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }
}

fn has_both_classes(dataset: &Dataset) -> bool {
    let labels = dataset.series().iter().flat_map(|s| s.labels());
    let (mut anomalous, mut normal) = (false, false);
    for l in labels {
        anomalous |= *l == LabelState::Anomalous;
        normal |= *l == LabelState::Normal;
    }
    anomalous && normal
}

/// Adjusted F1 at the best threshold on a labeled dataset.
pub fn validation_f1(detector: &Detector, dataset: &Dataset, spec: WindowSpec, aggregation: Aggregation) -> Result<f64> {
    let traces = dataset
        .series()
        .iter()
        .map(|s| detector.rolling_score(s, spec, aggregation))
        .collect::<Result<Vec<_>>>()?;
    Ok(select_threshold(&traces, dataset, EvalMode::Adjusted)?.f1)
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trains from scratch.
///
/// Point outliers and slopes are injected into the training split once, up front. With a
/// validation split holding both classes, the parameters of the best-validation epoch are kept
/// and training may stop early; otherwise the final parameters are returned.
pub fn fit(train: &Dataset, validation: Option<&Dataset>, config: &TrainConfig) -> Result<(ParameterSet, TrainReport)> {
    config.validate()?;
    let channels = train.channels().ok_or(Error::EmptyDataset)?;
    if channels != config.encoder.input_channels {
        return Err(Error::DimensionMismatch {
            expected: config.encoder.input_channels,
            got: channels,
        });
    }
    config.encoder.check_window(config.window.length());
    let started = Instant::now();
    let encoder = Encoder::new(config.encoder.clone())?;
    let params = encoder.init_parameters(&mut seeded(config.seed, STREAM_INIT));
    let imputed = Dataset::new(train.split(), train.series().iter().cloned().map(|s| s.imputed()).collect())?;
    let train = inject_dataset(&imputed, &config.augment, &mut seeded(config.seed, STREAM_INJECT))?;
    let validation = validation.filter(|v| has_both_classes(v));

    let mut rng = seeded(config.seed, STREAM_BATCHES);
    let mut state = TrainState::new(params, config.optimizer.clone());
    let mut stopper = EarlyStopping::new(config.early_stopping);
    let mut best_params = None;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut stopped_early = false;
    for _ in 0..config.epochs {
        let loss = train_epoch(&mut state, &encoder, &train, config, &mut rng)?;
        let mut record = EpochRecord {
            epoch: state.epoch,
            train_loss: loss,
            validation_f1: None,
        };
        let mut stop = false;
        if let Some(val) = validation {
            let detector = Detector::new(encoder.clone(), state.params.clone(), config.detector.clone())?;
            let f1 = validation_f1(&detector, val, config.window, config.validation_aggregation)?;
            record.validation_f1 = Some(f1);
            let decision = stopper.observe(state.epoch, f1);
            if decision.improved {
                best_params = Some(state.params.clone());
            }
            stop = decision.stop;
        }
        log::info!(
            "epoch {} loss {:.6}{}",
            record.epoch,
            record.train_loss,
            record.validation_f1.map_or_else(String::new, |f| format!(" val_f1 {f:.4}"))
        );
        epochs.push(record);
        if stop {
            stopped_early = state.epoch < config.epochs;
            break;
        }
    }
    let (params, best_epoch, best_validation_f1) = match (best_params, stopper.best()) {
        (Some(p), Some((epoch, f1))) => (p, epoch, Some(f1)),
        _ => (state.params, state.epoch, None),
    };
    let report = TrainReport {
        epochs,
        best_epoch,
        best_validation_f1,
        stopped_early,
        optimizer_steps: state.optimizer.step_count(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}
