//! Point-adjusted and point-wise precision / recall / F1, and global threshold search.
//!
//! Counts are pooled over every series before the ratios are taken. Timesteps that are
//! unlabeled or were never scored are dropped from the counts and split anomalous segments.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::detector::ScoreTrace;
use crate::error::{Error, Result};
use crate::series::{Dataset, LabelState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    #[default]
    Adjusted,
    Pointwise,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Adjusted => "adjusted",
            EvalMode::Pointwise => "pointwise",
        })
    }
}

/// Confusion counts over the evaluated timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub mode: EvalMode,
}

impl EvalResult {
    pub fn from_counts(counts: Counts, threshold: Option<f64>, mode: EvalMode) -> Self {
        let Counts { tp, fp, fn_ } = counts;
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Self {
            precision,
            recall,
            f1: f1_score(precision, recall),
            threshold,
            tp,
            fp,
            fn_,
            mode,
        }
    }

    pub fn counts(&self) -> Counts {
        Counts {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
        }
    }

    /// Aligned two-column text rendering.
    pub fn to_table(&self) -> String {
        let threshold = self.threshold.map_or_else(|| "-".to_string(), |t| format!("{t:.6}"));
        let rows = [
            ("mode", self.mode.to_string()),
            ("threshold", threshold),
            ("precision", format!("{:.4}", self.precision)),
            ("recall", format!("{:.4}", self.recall)),
            ("f1", format!("{:.4}", self.f1)),
            ("tp", self.tp.to_string()),
            ("fp", self.fp.to_string()),
            ("fn", self.fn_.to_string()),
        ];
        rows.iter().map(|(k, v)| format!("{k:<10} {v:>12}\n")).collect()
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Extends every detected true segment to its full length.
pub fn point_adjust(y_true: &[bool], y_pred: &[bool]) -> Result<Vec<bool>> {
    if y_true.len() != y_pred.len() {
        return Err(Error::DimensionMismatch {
            expected: y_true.len(),
            got: y_pred.len(),
        });
    }
    let mut out = y_pred.to_vec();
    let mut t = 0;
    while t < y_true.len() {
        if !y_true[t] {
            t += 1;
            continue;
        }
        let start = t;
        while t < y_true.len() && y_true[t] {
            t += 1;
        }
        if y_pred[start..t].iter().any(|&p| p) {
            out[start..t].fill(true);
        }
    }
    Ok(out)
}

/// Metrics for fully labeled binary vectors.
pub fn prf(y_true: &[bool], y_pred: &[bool], mode: EvalMode) -> Result<EvalResult> {
    if y_true.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels: Vec<LabelState> = y_true
        .iter()
        .map(|&a| if a { LabelState::Anomalous } else { LabelState::Normal })
        .collect();
    let preds: Vec<Option<bool>> = y_pred.iter().map(|&p| Some(p)).collect();
    if labels.len() != preds.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: preds.len(),
        });
    }
    Ok(EvalResult::from_counts(count_predictions(&labels, &preds, mode), None, mode))
}

/// Counts for one series; `None` predictions and unlabeled timesteps are masked out and break
/// segments.
pub fn count_predictions(labels: &[LabelState], preds: &[Option<bool>], mode: EvalMode) -> Counts {
    let mut counts = Counts::default();
    let mut seg_len = 0;
    let mut seg_hit = false;
    let close = |len: usize, hit: bool, counts: &mut Counts| {
        if hit {
            counts.tp += len;
        } else {
            counts.fn_ += len;
        }
    };
    for (label, pred) in labels.iter().zip(preds) {
        let in_segment = matches!((label, pred), (LabelState::Anomalous, Some(_)));
        if !in_segment && seg_len > 0 {
            close(seg_len, seg_hit, &mut counts);
            seg_len = 0;
            seg_hit = false;
        }
        match (label, pred) {
            (LabelState::Normal, Some(true)) => counts.fp += 1,
            (LabelState::Anomalous, Some(p)) => match mode {
                EvalMode::Adjusted => {
                    seg_len += 1;
                    seg_hit |= *p;
                }
                EvalMode::Pointwise if *p => counts.tp += 1,
                EvalMode::Pointwise => counts.fn_ += 1,
            },
            _ => {}
        }
    }
    if seg_len > 0 {
        close(seg_len, seg_hit, &mut counts);
    }
    counts
}

/// Series paired with their traces; series without any labeled timestep are skipped.
fn pair_traces<'a>(traces: &'a [ScoreTrace], dataset: &'a Dataset) -> Result<Vec<(&'a [LabelState], &'a [Option<f64>])>> {
    let mut pairs = Vec::new();
    for series in dataset.series() {
        if series.labels().iter().all(|l| *l == LabelState::Unlabeled) {
            continue;
        }
        let trace = traces
            .iter()
            .find(|t| t.series_id == series.id())
            .ok_or_else(|| Error::MissingTrace(series.id().to_string()))?;
        if trace.scores.len() != series.len() {
            return Err(Error::Shape {
                op: "evaluate",
                detail: format!(
                    "trace `{}` has {} points, series has {}",
                    series.id(),
                    trace.scores.len(),
                    series.len()
                ),
            });
        }
        pairs.push((series.labels(), trace.scores.as_slice()));
    }
    Ok(pairs)
}

fn binarize(scores: &[Option<f64>], threshold: f64) -> Vec<Option<bool>> {
    scores.iter().map(|s| s.map(|s| s >= threshold)).collect()
}

/// Pooled metrics at a fixed threshold; a timestep is predicted anomalous iff its score is at
/// least the threshold.
pub fn evaluate_dataset(traces: &[ScoreTrace], dataset: &Dataset, threshold: f64, mode: EvalMode) -> Result<EvalResult> {
    let mut counts = Counts::default();
    for (labels, scores) in pair_traces(traces, dataset)? {
        counts.add(count_predictions(labels, &binarize(scores, threshold), mode));
    }
    Ok(EvalResult::from_counts(counts, Some(threshold), mode))
}

/// Candidate thresholds, descending: the maximum, midpoints of consecutive distinct scores,
/// and the minimum.
pub fn threshold_candidates(scores: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut unique: Vec<f64> = scores.into_iter().collect();
    unique.sort_by(|a, b| b.total_cmp(a));
    unique.dedup();
    let mut out = Vec::with_capacity(2 * unique.len());
    for (i, &hi) in unique.iter().enumerate() {
        if i == 0 {
            out.push(hi);
        }
        if let Some(&lo) = unique.get(i + 1) {
            let mid = lo + (hi - lo) / 2.0;
            // midpoint can collapse onto `lo` for adjacent floats; `hi` makes the same cut
            out.push(if mid > lo { mid } else { hi });
        }
    }
    if unique.len() > 1 {
        out.push(*unique.last().expect("nonempty"));
    }
    out.dedup();
    out
}

/// Global threshold maximizing F1 over the pooled series.
///
/// Candidates are swept from high to low and the first best one is kept, so ties resolve to
/// the highest threshold.
pub fn select_threshold(traces: &[ScoreTrace], dataset: &Dataset, mode: EvalMode) -> Result<EvalResult> {
    let pairs = pair_traces(traces, dataset)?;
    select_threshold_pairs(&pairs, mode)
}

/// [`select_threshold`] over explicit `(labels, scores)` pairs.
pub fn select_threshold_pairs(pairs: &[(&[LabelState], &[Option<f64>])], mode: EvalMode) -> Result<EvalResult> {
    // (key, is_normal, weight): predicted positive iff key >= threshold
    let mut items: Vec<(f64, bool, usize)> = Vec::new();
    let mut all_scores = Vec::new();
    let mut positives = 0;
    for (labels, scores) in pairs {
        let mut seg: Option<(f64, usize)> = None;
        for (label, score) in labels.iter().zip(scores.iter()) {
            let anomalous = matches!((label, score), (LabelState::Anomalous, Some(_)));
            if !anomalous {
                if let Some((m, n)) = seg.take() {
                    items.push((m, false, n));
                }
            }
            let Some(s) = *score else { continue };
            match label {
                LabelState::Normal => {
                    items.push((s, true, 1));
                    all_scores.push(s);
                }
                LabelState::Anomalous => {
                    positives += 1;
                    all_scores.push(s);
                    match mode {
                        EvalMode::Pointwise => items.push((s, false, 1)),
                        EvalMode::Adjusted => {
                            seg = Some(match seg {
                                Some((m, n)) => (m.max(s), n + 1),
                                None => (s, 1),
                            })
                        }
                    }
                }
                LabelState::Unlabeled => {}
            }
        }
        if let Some((m, n)) = seg {
            items.push((m, false, n));
        }
    }
    let negatives = items.iter().filter(|i| i.1).count();
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateLabels(format!(
            "{positives} anomalous and {negatives} nominal scored timesteps"
        )));
    }
    if all_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    items.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best: Option<(f64, Counts)> = None;
    let mut best_f1 = -1.0;
    let (mut tp, mut fp) = (0, 0);
    let mut next = 0;
    for theta in threshold_candidates(all_scores) {
        while next < items.len() && items[next].0 >= theta {
            let (_, normal, w) = items[next];
            if normal {
                fp += w;
            } else {
                tp += w;
            }
            next += 1;
        }
        let counts = Counts {
            tp,
            fp,
            fn_: positives - tp,
        };
        let f1 = EvalResult::from_counts(counts, None, mode).f1;
        if f1 > best_f1 {
            best_f1 = f1;
            best = Some((theta, counts));
        }
    }
    let (theta, counts) = best.expect("at least one candidate");
    Ok(EvalResult::from_counts(counts, Some(theta), mode))
}
