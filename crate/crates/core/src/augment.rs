//! Synthetic anomaly generators.
//!
//! Two kinds of augmentation live here. Series-level injectors ([`inject_point_outliers`],
//! [`inject_slopes`]) rewrite raw training series before any cropping happens. Batch-level
//! generators ([`coe_augment`], [`mixup_augment`]) derive new windows from a batch of crops.
//! Every generator draws exclusively from the rng it is handed, so a fixed seed reproduces
//! the output bit for bit.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{iqr, std_dev, Dataset, LabelState, TimeSeries, Window};

/// Fallback spike scale when the local IQR and the series std are both degenerate.
pub const PO_SCALE_EPS: f64 = 1e-2;

/// Augmentation knobs carried by the training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Contextual outlier exposure examples, as a fraction of the base batch.
    pub coe_rate: f64,
    /// Mixup examples, as a fraction of the base batch.
    pub mixup_rate: f64,
    /// Beta(alpha, alpha) concentration for the mixup weight.
    pub mixup_alpha: f64,
    /// Point outliers injected into each training series.
    pub po_count_per_series: usize,
    /// Spike height range, in units of the local inter-quartile range.
    pub po_magnitude_range: [f64; 2],
    /// Points around the spike used to measure the local IQR.
    pub po_neighborhood: usize,
    /// Optional slope injection applied alongside point outliers.
    pub slopes: Option<SlopeParams>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            coe_rate: 0.0,
            mixup_rate: 0.0,
            mixup_alpha: 0.05,
            po_count_per_series: 0,
            po_magnitude_range: [0.5, 3.0],
            po_neighborhood: 100,
            slopes: None,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.coe_rate >= 0.0 && self.coe_rate.is_finite()) {
            return Err(Error::Config(format!("coe_rate must be >= 0, got {}", self.coe_rate)));
        }
        if !(self.mixup_rate >= 0.0 && self.mixup_rate.is_finite()) {
            return Err(Error::Config(format!("mixup_rate must be >= 0, got {}", self.mixup_rate)));
        }
        if !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            return Err(Error::Config(format!("mixup_alpha must be > 0, got {}", self.mixup_alpha)));
        }
        let [lo, hi] = self.po_magnitude_range;
        if !(lo <= hi) {
            return Err(Error::Config(format!("po_magnitude_range [{lo}, {hi}] is inverted")));
        }
        if let Some(slopes) = &self.slopes {
            slopes.validate()?;
        }
        Ok(())
    }
}

/// Slope injection parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeParams {
    pub count: usize,
    /// Inclusive range of region lengths.
    pub duration_range: [usize; 2],
    /// Final ramp height in units of the local channel std.
    pub magnitude_range: [f64; 2],
}

impl SlopeParams {
    fn validate(&self) -> Result<()> {
        let [dlo, dhi] = self.duration_range;
        if dlo == 0 || dlo > dhi {
            return Err(Error::Config(format!("slope duration_range [{dlo}, {dhi}] is invalid")));
        }
        let [mlo, mhi] = self.magnitude_range;
        if !(mlo <= mhi) {
            return Err(Error::Config(format!("slope magnitude_range [{mlo}, {mhi}] is inverted")));
        }
        Ok(())
    }
}

/// Uniformly random nonempty subset of `0..channels`, ascending.
pub fn random_channel_subset<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Vec<usize> {
    if channels == 1 {
        return vec![0];
    }
    loop {
        let subset: Vec<usize> = (0..channels).filter(|_| rng.gen_bool(0.5)).collect();
        if !subset.is_empty() {
            return subset;
        }
    }
}

/// Contextual outlier exposure producing `floor(|batch| * rate)` windows.
pub fn coe_augment<R: Rng + ?Sized>(batch: &[Window], rate: f64, rng: &mut R) -> Result<Vec<Window>> {
    coe_augment_n(batch, (batch.len() as f64 * rate).floor() as usize, rng)
}

/// Contextual outlier exposure producing exactly `count` windows.
///
/// Each output copies a receiver window and overwrites the chunk `[t1, t2]` of its suspect
/// segment (endpoints uniform, `t1 < t2` when `S > 1`) with a different donor's values at the
/// same rows, on a random nonempty subset of channels.
pub fn coe_augment_n<R: Rng + ?Sized>(batch: &[Window], count: usize, rng: &mut R) -> Result<Vec<Window>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall(batch.len()));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let receiver = rng.gen_range(0..batch.len());
        let donor = {
            let d = rng.gen_range(0..batch.len() - 1);
            if d >= receiver {
                d + 1
            } else {
                d
            }
        };
        let mut w = batch[receiver].clone();
        let spec = w.spec();
        let (t1, t2) = chunk_bounds(spec.suspect_length, rng);
        let channels = random_channel_subset(w.channels(), rng);
        let dims = w.channels();
        let donor_values = batch[donor].values();
        let values = w.values_mut();
        for row in spec.context_length + t1..=spec.context_length + t2 {
            for &c in &channels {
                values[row * dims + c] = donor_values[row * dims + c];
            }
        }
        w.set_label(1.0);
        w.set_skip_in_loss(false);
        out.push(w);
    }
    Ok(out)
}

fn chunk_bounds<R: Rng + ?Sized>(suspect_length: usize, rng: &mut R) -> (usize, usize) {
    if suspect_length == 1 {
        return (0, 0);
    }
    let picks = index::sample(rng, suspect_length, 2);
    let (a, b) = (picks.index(0), picks.index(1));
    (a.min(b), a.max(b))
}

/// Mixup producing `floor(|batch| * rate)` windows.
pub fn mixup_augment<R: Rng + ?Sized>(batch: &[Window], rate: f64, alpha: f64, rng: &mut R) -> Result<Vec<Window>> {
    mixup_augment_n(batch, (batch.len() as f64 * rate).floor() as usize, alpha, rng)
}

/// Mixup producing exactly `count` windows: `lambda ~ Beta(alpha, alpha)`, values and labels
/// combined as `lambda * a + (1 - lambda) * b` for a distinct pair `(a, b)`.
pub fn mixup_augment_n<R: Rng + ?Sized>(batch: &[Window], count: usize, alpha: f64, rng: &mut R) -> Result<Vec<Window>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall(batch.len()));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("mixup_alpha: {e}")))?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let pair = index::sample(rng, batch.len(), 2);
        let lambda: f64 = beta.sample(rng);
        out.push(mix_windows(&batch[pair.index(0)], &batch[pair.index(1)], lambda));
    }
    Ok(out)
}

/// Convex combination of two windows of the same shape.
pub fn mix_windows(a: &Window, b: &Window, lambda: f64) -> Window {
    let mut w = a.clone();
    for (v, other) in w.values_mut().iter_mut().zip(b.values()) {
        *v = lambda * *v + (1.0 - lambda) * other;
    }
    let label = if a.label() == b.label() {
        a.label()
    } else {
        lambda * a.label() + (1.0 - lambda) * b.label()
    };
    w.set_label(label);
    w.set_skip_in_loss(a.skip_in_loss() || b.skip_in_loss());
    w
}

/// Result of a series-level injection: the modified series plus the touched cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    pub series: TimeSeries,
    /// `(timestep, channel)` pairs whose value changed.
    pub cells: Vec<(usize, usize)>,
}

/// Adds signed spikes at `po_count_per_series` distinct random timesteps.
pub fn inject_point_outliers<R: Rng + ?Sized>(series: &TimeSeries, config: &AugmentConfig, rng: &mut R) -> TimeSeries {
    inject_point_outliers_traced(series, config, rng).series
}

/// [`inject_point_outliers`], also reporting which cells were modified.
pub fn inject_point_outliers_traced<R: Rng + ?Sized>(
    series: &TimeSeries,
    config: &AugmentConfig,
    rng: &mut R,
) -> Injection {
    let len = series.len();
    let count = config.po_count_per_series.min(len);
    let mut out = series.clone();
    let mut cells = Vec::new();
    if count == 0 {
        return Injection { series: out, cells };
    }
    let dims = series.channels();
    let half = config.po_neighborhood / 2;
    let [lo, hi] = config.po_magnitude_range;
    let mut positions: Vec<usize> = index::sample(rng, len, count).into_vec();
    positions.sort_unstable();
    let channel_std: Vec<f64> = (0..dims).map(|c| std_dev(&series.channel(c))).collect();
    for t in positions {
        let channels = random_channel_subset(dims, rng);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let weight = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let start = t.saturating_sub(half);
        let end = (t + half).clamp(t + 1, len);
        for c in channels {
            let neighborhood: Vec<f64> = (start..end).map(|u| series.value(u, c)).collect();
            let spread = local_scale(iqr(&neighborhood), channel_std[c]);
            out.values_mut()[t * dims + c] += sign * weight * spread;
            cells.push((t, c));
        }
        out.labels_mut()[t] = LabelState::Anomalous;
    }
    Injection { series: out, cells }
}

/// Spike scale: the local IQR, falling back to the series std and then [`PO_SCALE_EPS`].
pub fn local_scale(iqr: f64, series_std: f64) -> f64 {
    if iqr > 0.0 {
        iqr
    } else {
        series_std.max(PO_SCALE_EPS)
    }
}

/// Adds linear ramps over random regions and labels those regions anomalous.
pub fn inject_slopes<R: Rng + ?Sized>(series: &TimeSeries, params: &SlopeParams, rng: &mut R) -> Result<TimeSeries> {
    params.validate()?;
    let len = series.len();
    let [dlo, dhi] = params.duration_range;
    if dhi > len {
        return Err(Error::SeriesTooShort {
            id: series.id().to_string(),
            len,
            required: dhi,
        });
    }
    let [mlo, mhi] = params.magnitude_range;
    let mut out = series.clone();
    for _ in 0..params.count {
        let duration = rng.gen_range(dlo..=dhi);
        let start = rng.gen_range(0..=len - duration);
        let magnitude = if mhi > mlo { rng.gen_range(mlo..=mhi) } else { mlo };
        let channels = random_channel_subset(series.channels(), rng);
        let nb_start = start.saturating_sub(duration);
        let nb_end = (start + 2 * duration).min(len);
        for c in channels {
            let neighborhood: Vec<f64> = (nb_start..nb_end).map(|u| series.value(u, c)).collect();
            let sd = std_dev(&neighborhood);
            let scale = if sd > PO_SCALE_EPS { sd } else { 1.0 };
            add_ramp(&mut out, start, duration, c, magnitude * scale);
        }
    }
    Ok(out)
}

/// Adds a ramp rising linearly from 0 to `height` over `[start, start + duration)` on one
/// channel and labels the region anomalous.
pub fn add_ramp(series: &mut TimeSeries, start: usize, duration: usize, channel: usize, height: f64) {
    let dims = series.channels();
    for k in 0..duration {
        let frac = if duration == 1 { 1.0 } else { k as f64 / (duration - 1) as f64 };
        series.values_mut()[(start + k) * dims + channel] += frac * height;
        series.labels_mut()[start + k] = LabelState::Anomalous;
    }
}

/// Applies point outliers (and slopes, when configured) to every series of a dataset.
pub fn inject_dataset<R: Rng + ?Sized>(dataset: &Dataset, config: &AugmentConfig, rng: &mut R) -> Result<Dataset> {
    let mut series = Vec::with_capacity(dataset.len());
    for s in dataset.series() {
        let mut injected = inject_point_outliers(s, config, rng);
        if let Some(slopes) = &config.slopes {
            injected = inject_slopes(&injected, slopes, rng)?;
        }
        series.push(injected);
    }
    Dataset::new(dataset.split(), series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::{WindowOrigin, WindowSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn window(values: Vec<f64>, channels: usize, c: usize, s: usize, label: f64) -> Window {
        Window::new(
            values,
            channels,
            label,
            WindowOrigin {
                series_id: "x".into(),
                start: 0,
            },
            WindowSpec::new(c, s, 1).unwrap(),
        )
        .unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, c: usize, s: usize, d: usize) -> Vec<Window> {
        (0..n)
            .map(|_| {
                let values = (0..(c + s) * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                window(values, d, c, s, if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
            })
            .collect()
    }

    #[test]
    fn coe_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = random_batch(&mut rng, 8, 4, 3, 1);
        assert!(coe_augment(&batch, 0.0, &mut rng).unwrap().is_empty());
        let out = coe_augment(&batch, 0.5, &mut rng).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|w| w.label() == 1.0));
        assert!(matches!(coe_augment(&batch[..1], 1.0, &mut rng), Err(Error::BatchTooSmall(1))));
        // zero rate never needs a donor
        assert!(coe_augment(&batch[..1], 0.0, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn coe_positional_swap() {
        // receiver suspect [1,1,1], donor suspect [9,9,9]; find a draw that swaps rows 1..=2
        let receiver = window(vec![0.0, 0.0, 1.0, 1.0, 1.0], 1, 2, 3, 0.0);
        let donor = window(vec![5.0, 5.0, 9.0, 9.0, 9.0], 1, 2, 3, 0.0);
        let batch = vec![receiver, donor];
        let mut seen = false;
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = coe_augment_n(&batch, 1, &mut rng).unwrap();
            let w = &out[0];
            if w.context() == [0.0, 0.0] && w.suspect() == [1.0, 9.0, 9.0] {
                seen = true;
            }
            // chunks are contiguous and come from the other window at the same rows
            assert!(w.context() == batch[0].context() || w.context() == batch[1].context());
        }
        assert!(seen);
    }

    #[test]
    fn mixup_examples() {
        let a = window(vec![0.0; 4], 1, 2, 2, 0.0);
        let b = window(vec![2.0; 4], 1, 2, 2, 1.0);
        let m = mix_windows(&a, &b, 0.5);
        assert_eq!(m.values(), &[1.0; 4]);
        assert_eq!(m.label(), 0.5);
        let m = mix_windows(&a, &b, 1.0);
        assert_eq!(m.values(), a.values());
        assert_eq!(m.label(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = random_batch(&mut rng, 8, 3, 2, 1);
        assert_eq!(mixup_augment(&batch, 0.25, 0.05, &mut rng).unwrap().len(), 2);
        assert!(matches!(
            mixup_augment_n(&batch[..1], 1, 0.05, &mut rng),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn po_spike_is_signed_iqr_multiple() {
        // neighborhood [0,1,1,3,3,4] has q25 = 1, q75 = 3 (linear interpolation)
        let values = vec![0.0, 1.0, 1.0, 3.0, 3.0, 4.0];
        let s = TimeSeries::univariate("a", values.clone(), vec![LabelState::Normal; 6]).unwrap();
        assert_eq!(iqr(&values), 2.0);
        let config = AugmentConfig {
            po_count_per_series: 1,
            po_magnitude_range: [1.0, 1.0],
            po_neighborhood: 100,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inj = inject_point_outliers_traced(&s, &config, &mut rng);
        let (t, _) = inj.cells[0];
        let delta = inj.series.values()[t] - values[t];
        assert_eq!(delta.abs(), 2.0);
        assert_eq!(inj.series.labels()[t], LabelState::Anomalous);
    }

    #[test]
    fn po_zero_count_is_identity() {
        let s = TimeSeries::univariate("a", vec![1.0, 2.0, 3.0], vec![LabelState::Normal; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(inject_point_outliers(&s, &AugmentConfig::default(), &mut rng), s);
    }

    #[test]
    fn po_degenerate_iqr_falls_back() {
        let s = TimeSeries::univariate("a", vec![3.0; 50], vec![LabelState::Normal; 50]).unwrap();
        let config = AugmentConfig {
            po_count_per_series: 1,
            po_magnitude_range: [1.0, 1.0],
            ..Default::default()
        };
        let inj = inject_point_outliers_traced(&s, &config, &mut ChaCha8Rng::seed_from_u64(2));
        let (t, _) = inj.cells[0];
        let v = inj.series.values()[t];
        assert!(((v - 3.0).abs() - PO_SCALE_EPS).abs() < 1e-12);
        assert!(v != inj.series.values()[(t + 1) % 50]);
        assert_eq!(local_scale(0.0, 0.5), 0.5);
        assert_eq!(local_scale(0.0, 0.0), PO_SCALE_EPS);
    }

    #[test]
    fn slope_ramp_values() {
        let mut s = TimeSeries::univariate("a", vec![0.0; 10], vec![LabelState::Normal; 10]).unwrap();
        add_ramp(&mut s, 3, 4, 0, 1.0);
        let region = &s.values()[3..7];
        let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in region.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(s.labels()[3..7].iter().all(|l| l.is_anomalous()));
        assert!(!s.labels()[2].is_anomalous() && !s.labels()[7].is_anomalous());
    }

    #[test]
    fn slopes_respect_bounds() {
        let s = TimeSeries::univariate("a", vec![0.0; 10], vec![LabelState::Normal; 10]).unwrap();
        let none = SlopeParams {
            count: 0,
            duration_range: [2, 4],
            magnitude_range: [1.0, 2.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(inject_slopes(&s, &none, &mut rng).unwrap(), s);
        let some = SlopeParams { count: 2, ..none.clone() };
        let out = inject_slopes(&s, &some, &mut rng).unwrap();
        let anomalous = out.labels().iter().filter(|l| l.is_anomalous()).count();
        assert!((2..=8).contains(&anomalous));
        let too_long = SlopeParams {
            duration_range: [2, 11],
            ..none
        };
        assert!(inject_slopes(&s, &too_long, &mut rng).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            mixup_alpha: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            po_magnitude_range: [3.0, 1.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn coe_only_touches_suspect(seed in any::<u64>(), n in 2usize..10, c in 1usize..8, s in 1usize..6, d in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = random_batch(&mut rng, n, c, s, d);
            let out = coe_augment_n(&batch, 5, &mut rng).unwrap();
            for w in &out {
                prop_assert_eq!(w.label(), 1.0);
                let receiver = batch.iter().find(|b| b.context() == w.context());
                prop_assert!(receiver.is_some());
                // every suspect cell comes from some window of the batch at the same position
                for (i, v) in w.suspect().iter().enumerate() {
                    prop_assert!(batch.iter().any(|b| b.suspect()[i] == *v));
                }
            }
        }

        #[test]
        fn mixup_labels_are_convex(seed in any::<u64>(), n in 2usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = random_batch(&mut rng, n, 3, 2, 2);
            for w in mixup_augment_n(&batch, 6, 0.05, &mut rng).unwrap() {
                prop_assert!((0.0..=1.0).contains(&w.label()));
            }
        }
    }
}
