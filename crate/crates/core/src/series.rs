//! Time-series data model, standardization, window extraction and splits.
//!
//! Values are stored row-major: timestep `t`, channel `d` lives at
//! `values[t * channels + d]`. The same layout is used for [`Window`] values.

use std::collections::HashSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-timestep label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LabelState {
    #[default]
    Normal,
    Anomalous,
    Unlabeled,
}

impl LabelState {
    /// Integer code used by the canonical CSV format (`0`, `1`, `-1`).
    pub fn code(self) -> i8 {
        match self {
            LabelState::Normal => 0,
            LabelState::Anomalous => 1,
            LabelState::Unlabeled => -1,
        }
    }

    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            0 => Some(LabelState::Normal),
            1 => Some(LabelState::Anomalous),
            -1 => Some(LabelState::Unlabeled),
            _ => None,
        }
    }

    pub fn is_anomalous(self) -> bool {
        self == LabelState::Anomalous
    }
}

/// A multichannel series with per-timestep labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    id: String,
    values: Vec<f64>,
    channels: usize,
    labels: Vec<LabelState>,
    /// Raw timestamps as read from disk, kept verbatim for round-tripping.
    timestamps: Option<Vec<String>>,
    sampling_period: Option<f64>,
}

impl TimeSeries {
    /// Builds a series from row-major values. NaN is accepted (see [`TimeSeries::imputed`]),
    /// infinities are not.
    pub fn new(
        id: impl Into<String>,
        values: Vec<f64>,
        channels: usize,
        labels: Vec<LabelState>,
    ) -> Result<Self> {
        let id = id.into();
        if channels == 0 {
            return Err(Error::InvalidSeries(format!("series `{id}` has zero channels")));
        }
        if values.is_empty() || values.len() % channels != 0 {
            return Err(Error::InvalidSeries(format!(
                "series `{id}`: {} values do not form rows of {channels} channels",
                values.len()
            )));
        }
        let len = values.len() / channels;
        if labels.len() != len {
            return Err(Error::InvalidSeries(format!(
                "series `{id}`: {} labels for {len} timesteps",
                labels.len()
            )));
        }
        if values.iter().any(|v| v.is_infinite()) {
            return Err(Error::InvalidSeries(format!("series `{id}` contains infinite values")));
        }
        Ok(Self {
            id,
            values,
            channels,
            labels,
            timestamps: None,
            sampling_period: None,
        })
    }

    /// Univariate convenience constructor.
    pub fn univariate(id: impl Into<String>, values: Vec<f64>, labels: Vec<LabelState>) -> Result<Self> {
        Self::new(id, values, 1, labels)
    }

    pub fn with_timestamps(mut self, timestamps: Vec<String>) -> Result<Self> {
        if timestamps.len() != self.len() {
            return Err(Error::InvalidSeries(format!(
                "series `{}`: {} timestamps for {} timesteps",
                self.id,
                timestamps.len(),
                self.len()
            )));
        }
        self.timestamps = Some(timestamps);
        Ok(self)
    }

    pub fn with_sampling_period(mut self, period: f64) -> Self {
        self.sampling_period = Some(period);
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        self.id = id.into();
    }

    /// Number of timesteps.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn labels(&self) -> &[LabelState] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [LabelState] {
        &mut self.labels
    }

    pub fn timestamps(&self) -> Option<&[String]> {
        self.timestamps.as_deref()
    }

    pub fn sampling_period(&self) -> Option<f64> {
        self.sampling_period
    }

    pub fn value(&self, t: usize, channel: usize) -> f64 {
        self.values[t * self.channels + channel]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.channels..(t + 1) * self.channels]
    }

    /// Copy of one channel as a contiguous vector.
    pub fn channel(&self, channel: usize) -> Vec<f64> {
        self.values.iter().skip(channel).step_by(self.channels).copied().collect()
    }

    pub fn has_missing(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }

    pub fn has_labeled_anomalies(&self) -> bool {
        self.labels.iter().any(|l| l.is_anomalous())
    }

    /// Forward-fills NaN per channel; leading NaN become zero.
    pub fn imputed(mut self) -> Self {
        for d in 0..self.channels {
            let mut last = 0.0;
            for t in 0..self.len() {
                let v = &mut self.values[t * self.channels + d];
                if v.is_nan() {
                    *v = last;
                } else {
                    last = *v;
                }
            }
        }
        self
    }

    /// Contiguous sub-series `[start, end)` carrying labels and timestamps along.
    pub fn slice(&self, start: usize, end: usize, id: impl Into<String>) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::InvalidSeries(format!(
                "slice [{start}, {end}) out of range for series `{}` of length {}",
                self.id,
                self.len()
            )));
        }
        let mut out = Self::new(
            id,
            self.values[start * self.channels..end * self.channels].to_vec(),
            self.channels,
            self.labels[start..end].to_vec(),
        )?;
        out.timestamps = self.timestamps.as_ref().map(|ts| ts[start..end].to_vec());
        out.sampling_period = self.sampling_period;
        Ok(out)
    }

    /// Left-pads by repeating the first row until the series has `len` timesteps.
    /// Padded timesteps are labeled `Unlabeled`.
    pub fn left_padded(&self, len: usize) -> Self {
        if self.len() >= len {
            return self.clone();
        }
        let pad = len - self.len();
        let mut values = Vec::with_capacity(len * self.channels);
        for _ in 0..pad {
            values.extend_from_slice(self.row(0));
        }
        values.extend_from_slice(&self.values);
        let mut labels = vec![LabelState::Unlabeled; pad];
        labels.extend_from_slice(&self.labels);
        Self {
            id: self.id.clone(),
            values,
            channels: self.channels,
            labels,
            timestamps: None,
            sampling_period: self.sampling_period,
        }
    }
}

/// Window geometry: `context_length` rows of context followed by `suspect_length` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowSpec {
    pub context_length: usize,
    pub suspect_length: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_stride() -> usize {
    1
}

impl WindowSpec {
    pub fn new(context_length: usize, suspect_length: usize, stride: usize) -> Result<Self> {
        let spec = Self {
            context_length,
            suspect_length,
            stride,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_length == 0 || self.suspect_length == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "window lengths and stride must be positive (context {}, suspect {}, stride {})",
                self.context_length, self.suspect_length, self.stride
            )));
        }
        Ok(())
    }

    /// Total window length `C + S`.
    pub fn length(&self) -> usize {
        self.context_length + self.suspect_length
    }

    pub fn with_stride(self, stride: usize) -> Self {
        Self { stride, ..self }
    }
}

/// Where a window was cut from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowOrigin {
    pub series_id: String,
    pub start: usize,
}

/// A fixed-length slice of a series with a (possibly soft) label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    values: Vec<f64>,
    channels: usize,
    label: f64,
    skip_in_loss: bool,
    origin: WindowOrigin,
    spec: WindowSpec,
}

impl Window {
    pub fn new(
        values: Vec<f64>,
        channels: usize,
        label: f64,
        origin: WindowOrigin,
        spec: WindowSpec,
    ) -> Result<Self> {
        if channels == 0 || values.len() != spec.length() * channels {
            return Err(Error::Shape {
                op: "window",
                detail: format!(
                    "{} values for a {}x{} window",
                    values.len(),
                    spec.length(),
                    channels
                ),
            });
        }
        if !(0.0..=1.0).contains(&label) {
            return Err(Error::Config(format!("window label {label} outside [0, 1]")));
        }
        Ok(Self {
            values,
            channels,
            label,
            skip_in_loss: false,
            origin,
            spec,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.spec.length()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn label(&self) -> f64 {
        self.label
    }

    /// Sets the label, clamped into `[0, 1]`.
    pub fn set_label(&mut self, label: f64) {
        self.label = label.clamp(0.0, 1.0);
    }

    pub fn skip_in_loss(&self) -> bool {
        self.skip_in_loss
    }

    pub fn set_skip_in_loss(&mut self, skip: bool) {
        self.skip_in_loss = skip;
    }

    pub fn origin(&self) -> &WindowOrigin {
        &self.origin
    }

    pub fn spec(&self) -> WindowSpec {
        self.spec
    }

    /// Context rows `[0, C)`.
    pub fn context(&self) -> &[f64] {
        &self.values[..self.spec.context_length * self.channels]
    }

    /// Suspect rows `[C, L)`.
    pub fn suspect(&self) -> &[f64] {
        &self.values[self.spec.context_length * self.channels..]
    }

    pub fn value(&self, row: usize, channel: usize) -> f64 {
        self.values[row * self.channels + channel]
    }
}

/// How unlabeled suspect timesteps contribute to a window label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum UnlabeledPolicy {
    #[default]
    UnlabeledAsNormal,
    UnlabeledExcluded,
}

/// Result of aggregating suspect-segment labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowLabel {
    pub value: f64,
    pub skip_in_loss: bool,
}

/// Window label from its suspect-segment labels: 1 if any timestep is anomalous.
pub fn window_label(suspect: &[LabelState], policy: UnlabeledPolicy) -> WindowLabel {
    if suspect.iter().any(|l| l.is_anomalous()) {
        return WindowLabel {
            value: 1.0,
            skip_in_loss: false,
        };
    }
    let skip = policy == UnlabeledPolicy::UnlabeledExcluded
        && !suspect.is_empty()
        && suspect.iter().all(|l| *l == LabelState::Unlabeled);
    WindowLabel {
        value: 0.0,
        skip_in_loss: skip,
    }
}

fn cut_window(series: &TimeSeries, start: usize, spec: WindowSpec, policy: UnlabeledPolicy) -> Window {
    let d = series.channels();
    let len = spec.length();
    let values = series.values()[start * d..(start + len) * d].to_vec();
    let label = window_label(&series.labels()[start + spec.context_length..start + len], policy);
    Window {
        values,
        channels: d,
        label: label.value,
        skip_in_loss: label.skip_in_loss,
        origin: WindowOrigin {
            series_id: series.id().to_string(),
            start,
        },
        spec,
    }
}

/// Number of windows `sliding_windows` produces.
pub fn window_count(len: usize, spec: WindowSpec) -> usize {
    if len < spec.length() {
        0
    } else {
        (len - spec.length()) / spec.stride + 1
    }
}

/// Overlapping windows starting at `0, stride, 2*stride, ...`.
pub fn sliding_windows(series: &TimeSeries, spec: WindowSpec, policy: UnlabeledPolicy) -> Result<Vec<Window>> {
    spec.validate()?;
    if series.len() < spec.length() {
        return Err(Error::SeriesTooShort {
            id: series.id().to_string(),
            len: series.len(),
            required: spec.length(),
        });
    }
    Ok((0..window_count(series.len(), spec))
        .map(|i| cut_window(series, i * spec.stride, spec, policy))
        .collect())
}

/// Uniform random crops: `series_per_batch` series drawn with replacement among those at
/// least one window long, then `crops_per_series` uniform start offsets from each.
pub fn random_crops<R: Rng + ?Sized>(
    dataset: &Dataset,
    series_per_batch: usize,
    crops_per_series: usize,
    spec: WindowSpec,
    policy: UnlabeledPolicy,
    rng: &mut R,
) -> Result<Vec<Window>> {
    spec.validate()?;
    let len = spec.length();
    let usable: Vec<&TimeSeries> = dataset.series().iter().filter(|s| s.len() >= len).collect();
    if usable.is_empty() {
        return Err(Error::NoUsableSeries { required: len });
    }
    let mut out = Vec::with_capacity(series_per_batch * crops_per_series);
    for _ in 0..series_per_batch {
        let series = usable[rng.gen_range(0..usable.len())];
        for _ in 0..crops_per_series {
            let start = rng.gen_range(0..=series.len() - len);
            out.push(cut_window(series, start, spec, policy));
        }
    }
    Ok(out)
}

/// Dataset split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// A collection of series sharing a split tag; ids are unique.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    split: Split,
    series: Vec<TimeSeries>,
}

impl Dataset {
    pub fn new(split: Split, series: Vec<TimeSeries>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut channels = None;
        for s in &series {
            if !seen.insert(s.id()) {
                return Err(Error::DuplicateId(s.id().to_string()));
            }
            match channels {
                None => channels = Some(s.channels()),
                Some(d) if d != s.channels() => {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: s.channels(),
                    })
                }
                _ => {}
            }
        }
        Ok(Self { split, series })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn series(&self) -> &[TimeSeries] {
        &self.series
    }

    pub fn series_mut(&mut self) -> &mut [TimeSeries] {
        &mut self.series
    }

    pub fn into_series(self) -> Vec<TimeSeries> {
        self.series
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    /// Channel count shared by all series, `None` when empty.
    pub fn channels(&self) -> Option<usize> {
        self.series.first().map(|s| s.channels())
    }

    pub fn get(&self, id: &str) -> Option<&TimeSeries> {
        self.series.iter().find(|s| s.id() == id)
    }

    pub fn has_labeled_anomalies(&self) -> bool {
        self.series.iter().any(|s| s.has_labeled_anomalies())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StandardizeMethod {
    #[default]
    MeanStd,
    MedianIqr,
}

/// Per-channel location and scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub location: Vec<f64>,
    pub scale: Vec<f64>,
}

impl StandardizationStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            location: vec![0.0; channels],
            scale: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.location.len()
    }
}

/// Linear-interpolated quantile of an ascending slice (`q` in `[0, 1]`).
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub(crate) fn sorted_copy(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Inter-quartile range with linear interpolation.
pub(crate) fn iqr(values: &[f64]) -> f64 {
    let sorted = sorted_copy(values);
    quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25)
}

/// Population standard deviation.
pub(crate) fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Pooled per-channel statistics over every value in the dataset, NaN ignored.
pub fn fit_standardizer(dataset: &Dataset, method: StandardizeMethod) -> Result<StandardizationStats> {
    let d = dataset.channels().ok_or(Error::EmptyDataset)?;
    let mut location = Vec::with_capacity(d);
    let mut scale = Vec::with_capacity(d);
    for c in 0..d {
        let pooled: Vec<f64> = dataset
            .series()
            .iter()
            .flat_map(|s| s.values().iter().skip(c).step_by(d).copied())
            .filter(|v| !v.is_nan())
            .collect();
        if pooled.is_empty() {
            location.push(0.0);
            scale.push(1.0);
            continue;
        }
        let (loc, spread) = match method {
            StandardizeMethod::MeanStd => {
                let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
                (mean, std_dev(&pooled))
            }
            StandardizeMethod::MedianIqr => {
                let sorted = sorted_copy(&pooled);
                (
                    quantile_sorted(&sorted, 0.5),
                    quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25),
                )
            }
        };
        location.push(loc);
        scale.push(if spread > f64::EPSILON * loc.abs().max(1.0) { spread } else { 1.0 });
    }
    Ok(StandardizationStats { location, scale })
}

/// `(x - location) / scale` per channel; labels untouched.
pub fn standardize(series: &TimeSeries, stats: &StandardizationStats) -> Result<TimeSeries> {
    map_channels(series, stats, |v, loc, sc| (v - loc) / sc)
}

/// Inverse of [`standardize`].
pub fn unstandardize(series: &TimeSeries, stats: &StandardizationStats) -> Result<TimeSeries> {
    map_channels(series, stats, |v, loc, sc| v * sc + loc)
}

fn map_channels(
    series: &TimeSeries,
    stats: &StandardizationStats,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Result<TimeSeries> {
    let d = series.channels();
    if stats.channels() != d || stats.scale.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: stats.channels(),
        });
    }
    let mut out = series.clone();
    for (i, v) in out.values_mut().iter_mut().enumerate() {
        let c = i % d;
        *v = f(*v, stats.location[c], stats.scale[c]);
    }
    Ok(out)
}

/// Train / validation / test split of one series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesSplit {
    pub train: TimeSeries,
    pub validation: TimeSeries,
    pub test: TimeSeries,
}

/// Last `floor(T/2)` points are test; the prefix is split 60/40 into train and validation
/// (30% and 20% of the whole series).
pub fn split_yahoo_style(series: &TimeSeries) -> Result<SeriesSplit> {
    let t = series.len();
    let test_len = t / 2;
    let prefix = t - test_len;
    let train_len = prefix * 3 / 5;
    let val_len = prefix - train_len;
    if test_len == 0 || train_len == 0 || val_len == 0 {
        return Err(Error::SeriesTooShort {
            id: series.id().to_string(),
            len: t,
            required: 4,
        });
    }
    let id = series.id();
    Ok(SeriesSplit {
        train: series.slice(0, train_len, id)?,
        validation: series.slice(train_len, prefix, id)?,
        test: series.slice(prefix, t, id)?,
    })
}
