//! Noisy sinusoids with Gaussian-widened spike anomalies.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{Dataset, LabelState, Split, TimeSeries};

/// Fraction of the spike magnitude above which a widened timestep is labeled anomalous.
pub const LABEL_FRACTION: f64 = 0.1;
/// Kernel half-width in units of the width parameter.
pub const KERNEL_TRUNCATION: f64 = 4.0;

/// `amplitude * sin(2 pi t / period) + N(0, noise_std^2)`, all labels normal.
pub fn gen_sine<R: Rng + ?Sized>(
    id: impl Into<String>,
    len: usize,
    period: f64,
    amplitude: f64,
    noise_std: f64,
    rng: &mut R,
) -> Result<TimeSeries> {
    if len == 0 || !(period > 0.0) || !(noise_std >= 0.0) {
        return Err(Error::Config(format!(
            "sine needs len >= 1, period > 0, noise_std >= 0 (got {len}, {period}, {noise_std})"
        )));
    }
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let values = (0..len)
        .map(|t| amplitude * (std::f64::consts::TAU * t as f64 / period).sin() + noise.sample(rng))
        .collect();
    TimeSeries::univariate(id, values, vec![LabelState::Normal; len])
}

/// Peak-normalized Gaussian kernel value at integer `offset`; zero beyond the truncation
/// radius. A non-positive width gives the unit impulse.
pub fn bump(offset: i64, width: f64) -> f64 {
    if width <= 0.0 {
        return if offset == 0 { 1.0 } else { 0.0 };
    }
    let radius = (KERNEL_TRUNCATION * width).ceil() as i64;
    if offset.abs() > radius {
        return 0.0;
    }
    let x = offset as f64 / width;
    (-0.5 * x * x).exp()
}

/// Adds `base_magnitude * bump(t - p, width)` for every spike position `p` to channel 0..D and
/// labels the timesteps where the summed perturbation exceeds `LABEL_FRACTION * |base_magnitude|`.
pub fn widen_anomalies(series: &TimeSeries, positions: &[usize], base_magnitude: f64, width: f64) -> Result<TimeSeries> {
    let signed: Vec<(usize, f64)> = positions.iter().map(|&p| (p, base_magnitude)).collect();
    widen_signed(series, &signed, width)
}

/// [`widen_anomalies`] with a magnitude per spike.
pub fn widen_signed(series: &TimeSeries, spikes: &[(usize, f64)], width: f64) -> Result<TimeSeries> {
    let len = series.len();
    if let Some(&(p, _)) = spikes.iter().find(|(p, _)| *p >= len) {
        return Err(Error::InvalidSeries(format!("spike position {p} outside series of length {len}")));
    }
    if !(width >= 0.0 && width.is_finite()) {
        return Err(Error::Config(format!("anomaly width must be finite and >= 0, got {width}")));
    }
    let mut perturbation = vec![0.0; len];
    let radius = if width > 0.0 { (KERNEL_TRUNCATION * width).ceil() as i64 } else { 0 };
    for &(p, magnitude) in spikes {
        let lo = (p as i64 - radius).max(0);
        let hi = (p as i64 + radius).min(len as i64 - 1);
        for t in lo..=hi {
            perturbation[t as usize] += magnitude * bump(t - p as i64, width);
        }
    }
    let mut out = series.clone();
    let dims = out.channels();
    for (t, delta) in perturbation.iter().enumerate() {
        for c in 0..dims {
            out.values_mut()[t * dims + c] += delta;
        }
        let threshold = spikes
            .iter()
            .filter(|(p, _)| (t as i64 - *p as i64).abs() <= radius)
            .map(|(_, m)| LABEL_FRACTION * m.abs())
            .fold(f64::INFINITY, f64::min);
        if threshold.is_finite() && delta.abs() > threshold {
            out.labels_mut()[t] = LabelState::Anomalous;
        }
    }
    Ok(out)
}

/// Generation settings shared by every cell of a width suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub train_series: usize,
    pub test_series: usize,
    pub length: usize,
    pub period: f64,
    pub amplitude: f64,
    pub noise_std: f64,
    pub anomalies_per_series: usize,
    /// Spike height; each spike gets a random sign.
    pub base_magnitude: f64,
    /// No spike within this many timesteps of either end.
    pub margin: usize,
    /// Minimum distance between spikes of one series.
    pub min_gap: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            train_series: 50,
            test_series: 50,
            length: 2000,
            period: 100.0,
            amplitude: 1.0,
            noise_std: 0.1,
            anomalies_per_series: 5,
            base_magnitude: 2.0,
            margin: 100,
            min_gap: 100,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_series == 0 || self.test_series == 0 {
            return Err(Error::Config("suite needs at least one train and one test series".into()));
        }
        let usable = self.length.saturating_sub(2 * self.margin);
        let needed = self.anomalies_per_series.saturating_sub(1) * self.min_gap + 1;
        if self.anomalies_per_series > 0 && usable < needed {
            return Err(Error::Config(format!(
                "{} spikes with gap {} do not fit in length {} with margin {}",
                self.anomalies_per_series, self.min_gap, self.length, self.margin
            )));
        }
        Ok(())
    }
}

/// One (width, seed) pair of the suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteCell {
    pub width: f64,
    pub seed: u64,
    pub train: Dataset,
    pub test: Dataset,
    pub provenance: Provenance,
}

/// Everything needed to regenerate a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub width: f64,
    pub seed: u64,
    pub config: SuiteConfig,
    /// Spike `(position, magnitude)` per test series id.
    pub spikes: Vec<(String, Vec<(usize, f64)>)>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Spike positions at least `min_gap` apart within `[margin, len - margin)`, ascending.
fn spike_positions<R: Rng + ?Sized>(config: &SuiteConfig, rng: &mut R) -> Vec<usize> {
    let n = config.anomalies_per_series;
    if n == 0 {
        return Vec::new();
    }
    // stars and bars over the slack left after mandatory gaps keeps the draw uniform
    let span = config.length - 2 * config.margin;
    let slack = span - ((n - 1) * config.min_gap + 1);
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.gen_range(0..=slack)).collect();
    cuts.sort_unstable();
    cuts.iter()
        .enumerate()
        .map(|(i, c)| config.margin + c + i * config.min_gap)
        .collect()
}

/// The noise-only base datasets of a seed: `(train, test, spikes)`.
fn base_for_seed(config: &SuiteConfig, seed: u64) -> Result<(Vec<TimeSeries>, Vec<TimeSeries>, Vec<Vec<(usize, f64)>>)> {
    let mut train_rng = stream(seed, 10);
    let mut test_rng = stream(seed, 11);
    let mut spike_rng = stream(seed, 12);
    let train = (0..config.train_series)
        .map(|i| gen_sine(format!("train_{i:03}"), config.length, config.period, config.amplitude, config.noise_std, &mut train_rng))
        .collect::<Result<Vec<_>>>()?;
    let test = (0..config.test_series)
        .map(|i| gen_sine(format!("test_{i:03}"), config.length, config.period, config.amplitude, config.noise_std, &mut test_rng))
        .collect::<Result<Vec<_>>>()?;
    let spikes = (0..config.test_series)
        .map(|_| {
            spike_positions(config, &mut spike_rng)
                .into_iter()
                .map(|p| (p, *[-1.0, 1.0].choose(&mut spike_rng).expect("nonempty") * config.base_magnitude))
                .collect()
        })
        .collect();
    Ok((train, test, spikes))
}

/// One train/test pair per `(width, seed)`, seeds outermost. For a given seed every width
/// shares the same noise and spike positions; train series never contain anomalies.
pub fn make_width_suite(widths: &[f64], seeds: &[u64], config: &SuiteConfig) -> Result<Vec<SuiteCell>> {
    if widths.is_empty() || seeds.is_empty() {
        return Err(Error::Config("width suite needs at least one width and one seed".into()));
    }
    config.validate()?;
    let mut cells = Vec::with_capacity(widths.len() * seeds.len());
    for &seed in seeds {
        let (train, test, spikes) = base_for_seed(config, seed)?;
        for &width in widths {
            let widened = test
                .iter()
                .zip(&spikes)
                .map(|(s, sp)| widen_signed(s, sp, width))
                .collect::<Result<Vec<_>>>()?;
            cells.push(SuiteCell {
                width,
                seed,
                train: Dataset::new(Split::Train, train.clone())?,
                test: Dataset::new(Split::Test, widened)?,
                provenance: Provenance {
                    generator: "sine-width-suite".into(),
                    width,
                    seed,
                    config: config.clone(),
                    spikes: test.iter().map(|s| s.id().to_string()).zip(spikes.iter().cloned()).collect(),
                },
            });
        }
    }
    Ok(cells)
}
