//! Distances, the contextual hypersphere loss, and window/rolling scoring.
//!
//! A window is scored by the distance between the embedding of the whole window and the
//! embedding of its context prefix. With `s` the distance (or its square), the pseudo
//! probability of an anomaly is `p = 1 - exp(-s)` and the training loss is the binary
//! cross-entropy of `p`, which simplifies to `(1 - y) s - y log(1 - exp(-s))`.

use serde::{Deserialize, Serialize};

use crate::encoder::{rows, windows_to_tensor, Embedding, Encoder};
use crate::error::{Error, Result};
use crate::nn::{Graph, ParameterSet, Tensor, Var};
use crate::series::{sliding_windows, TimeSeries, UnlabeledPolicy, Window, WindowSpec};

/// Clamp applied to `exp(-s)` before taking logs.
pub const PROB_EPS: f64 = 1e-9;
/// Lower clamp on `1 + cos` in the cosine distance.
pub const COS_EPS: f64 = 1e-8;

const SCORE_BATCH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceKind {
    #[default]
    Euclidean,
    CosineLog,
}

/// How a distance becomes the exponent of the scoring function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScoringFunction {
    /// `l(d) = exp(-d^2)`.
    #[default]
    SquaredExp,
    /// `l(d) = exp(-|d|)`.
    Exp,
}

impl ScoringFunction {
    /// Exponent `s` such that `l(d) = exp(-s)`.
    pub fn exponent(self, distance: f64) -> f64 {
        match self {
            ScoringFunction::SquaredExp => distance * distance,
            ScoringFunction::Exp => distance.abs(),
        }
    }

    /// Pseudo-probability of an anomaly, `1 - l(d)`.
    pub fn probability(self, distance: f64) -> f64 {
        1.0 - (-self.exponent(distance)).exp()
    }
}

/// Fixed hypersphere center for the non-contextual objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypersphereCenter(pub Vec<f64>);

impl HypersphereCenter {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }
}

/// Which center the distance is measured from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Objective {
    /// Center is the context embedding of each window.
    #[default]
    Contextual,
    /// Plain hypersphere classifier around a fixed center (zero when omitted).
    FixedCenter { center: Option<Vec<f64>> },
}

fn check_dims(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(())
}

/// Euclidean distance.
pub fn dist_l2(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dims(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// `-log((1 + cossim(x, y)) / 2)`, with `1 + cossim` clamped to `[COS_EPS, 2]`.
pub fn dist_cos(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dims(x, y)?;
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::ZeroVector);
    }
    let cos = x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / (nx * ny);
    let arg = ((1.0 + cos) / 2.0).clamp(COS_EPS / 2.0, 1.0);
    Ok(-arg.ln())
}

pub fn distance(kind: DistanceKind, x: &[f64], y: &[f64]) -> Result<f64> {
    match kind {
        DistanceKind::Euclidean => dist_l2(x, y),
        DistanceKind::CosineLog => dist_cos(x, y),
    }
}

/// `(1 - y) s - y log(1 - clamp(exp(-s)))` for exponent `s`.
pub fn loss_from_exponent(s: f64, y: f64) -> f64 {
    // 1 - q through expm1: the direct form cancels badly for small s
    let one_minus_q = (-(-s).exp_m1()).clamp(PROB_EPS, 1.0 - PROB_EPS);
    (1.0 - y) * s - y * one_minus_q.ln()
}

/// Contextual hypersphere loss for one window with the default `exp(-d^2)` scoring.
pub fn contextual_hsc_loss(z: &Embedding, z_context: &Embedding, y: f64, dist: DistanceKind) -> Result<f64> {
    contextual_hsc_loss_with(z, z_context, y, dist, ScoringFunction::SquaredExp)
}

pub fn contextual_hsc_loss_with(
    z: &Embedding,
    z_context: &Embedding,
    y: f64,
    dist: DistanceKind,
    scoring: ScoringFunction,
) -> Result<f64> {
    let d = distance(dist, z.as_slice(), z_context.as_slice())?;
    Ok(loss_from_exponent(scoring.exponent(d), y))
}

/// Hypersphere classifier loss around a fixed center.
pub fn hsc_loss(z: &Embedding, y: f64, center: &HypersphereCenter) -> Result<f64> {
    let d = dist_l2(z.as_slice(), &center.0)?;
    Ok(loss_from_exponent(d * d, y))
}

/// Binary cross-entropy `-[y log p + (1 - y) log(1 - p)]`.
pub fn bce(p: f64, y: f64) -> f64 {
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Per-row scoring exponent `s` on the graph for embeddings `z`, `center` (`[N, E]` each).
pub fn graph_exponent(
    g: &mut Graph,
    z: Var,
    center: Var,
    dist: DistanceKind,
    scoring: ScoringFunction,
) -> Result<Var> {
    match dist {
        DistanceKind::Euclidean => {
            let diff = g.sub(z, center)?;
            let sq = g.square(diff)?;
            let d2 = g.sum_rows(sq)?;
            match scoring {
                ScoringFunction::SquaredExp => Ok(d2),
                ScoringFunction::Exp => g.sqrt(d2),
            }
        }
        DistanceKind::CosineLog => {
            let prod = g.mul(z, center)?;
            let dot = g.sum_rows(prod)?;
            let nz = g.euclidean_norm_rows(z)?;
            let nc = g.euclidean_norm_rows(center)?;
            let norms = g.mul(nz, nc)?;
            let cos = g.div(dot, norms)?;
            let half = g.scale(cos, 0.5)?;
            let arg = g.shift(half, 0.5)?;
            let arg = g.clamp(arg, COS_EPS / 2.0, 1.0)?;
            let log = g.log(arg)?;
            let d = g.neg(log)?;
            match scoring {
                ScoringFunction::SquaredExp => g.square(d),
                ScoringFunction::Exp => Ok(d),
            }
        }
    }
}

/// Mean loss over the windows whose weight is nonzero.
///
/// `labels` and `weights` are per-row constants; weights are `1 / n_active` for active rows
/// and `0` for rows excluded from the loss.
pub fn graph_loss(g: &mut Graph, exponent: Var, labels: &[f64], weights: &[f64]) -> Result<Var> {
    let n = labels.len();
    let one_minus_q = g.one_minus_exp_neg(exponent)?;
    let one_minus_q = g.clamp(one_minus_q, PROB_EPS, 1.0 - PROB_EPS)?;
    let log_term = g.log(one_minus_q)?;
    let y = g.constant(Tensor::vector(labels.to_vec()))?;
    let not_y = g.constant(Tensor::vector(labels.iter().map(|y| 1.0 - y).collect()))?;
    let pull = g.mul(not_y, exponent)?;
    let push = g.mul(y, log_term)?;
    let per = g.sub(pull, push)?;
    let w = g.constant(Tensor::new(vec![n], weights.to_vec())?)?;
    let weighted = g.mul(per, w)?;
    g.sum(weighted)
}

/// Loss weights for a batch: `1 / n_active` for windows kept in the loss, `0` otherwise.
pub fn loss_weights(windows: &[Window]) -> Vec<f64> {
    let active = windows.iter().filter(|w| !w.skip_in_loss()).count();
    windows
        .iter()
        .map(|w| if w.skip_in_loss() || active == 0 { 0.0 } else { 1.0 / active as f64 })
        .collect()
}

/// Aggregation of the scores each timestep receives from overlapping suspect windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    Mean,
    #[serde(alias = "max")]
    MaxFirstAlert,
}

/// Per-timestep scores for one series; `None` marks timesteps no suspect window covered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrace {
    pub series_id: String,
    pub scores: Vec<Option<f64>>,
    pub probabilities: Vec<Option<f64>>,
    pub aggregation: Aggregation,
}

impl ScoreTrace {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Scoring settings shared by training and inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DetectorConfig {
    pub distance: DistanceKind,
    pub scoring: ScoringFunction,
    pub objective: Objective,
}

impl DetectorConfig {
    pub fn center(&self, dim: usize) -> Result<Option<HypersphereCenter>> {
        match &self.objective {
            Objective::Contextual => Ok(None),
            Objective::FixedCenter { center: None } => Ok(Some(HypersphereCenter::zeros(dim))),
            Objective::FixedCenter { center: Some(c) } => {
                if c.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: c.len(),
                    });
                }
                Ok(Some(HypersphereCenter(c.clone())))
            }
        }
    }

    /// Builds the per-window loss exponents for a batch on the graph.
    pub fn batch_exponent(
        &self,
        g: &mut Graph,
        encoder: &Encoder,
        params: &crate::encoder::BoundParams,
        windows: &[Window],
    ) -> Result<Var> {
        let (z, zc) = encoder.embed_pair(g, params, windows)?;
        let center = match self.center(encoder.config().embedding_dim)? {
            None => zc,
            Some(c) => {
                let n = windows.len();
                let data = c.0.iter().copied().cycle().take(n * c.0.len()).collect();
                g.constant(Tensor::new(vec![n, c.0.len()], data)?)?
            }
        };
        let dist = match self.objective {
            Objective::Contextual => self.distance,
            Objective::FixedCenter { .. } => DistanceKind::Euclidean,
        };
        graph_exponent(g, z, center, dist, self.scoring)
    }
}

/// A trained encoder ready to score windows.
#[derive(Debug, Clone)]
pub struct Detector {
    encoder: Encoder,
    params: ParameterSet,
    config: DetectorConfig,
}

impl Detector {
    pub fn new(encoder: Encoder, params: ParameterSet, config: DetectorConfig) -> Result<Self> {
        encoder.check_parameters(&params)?;
        config.center(encoder.config().embedding_dim)?;
        Ok(Self {
            encoder,
            params,
            config,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    /// `(score, probability)` for one window.
    pub fn score_window(&self, window: &Window) -> Result<(f64, f64)> {
        Ok(self.score_windows(std::slice::from_ref(window))?[0])
    }

    /// `(score, probability)` per window; windows must share one spec.
    pub fn score_windows(&self, windows: &[Window]) -> Result<Vec<(f64, f64)>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(SCORE_BATCH) {
            let mut g = Graph::new();
            let p = self.encoder.bind(&mut g, &self.params, false)?;
            let spec = chunk[0].spec();
            let input = g.constant(windows_to_tensor(chunk)?)?;
            let feats = self.encoder.features(&mut g, &p, input)?;
            let z = self.encoder.embed(&mut g, &p, feats, spec.length())?;
            let z = rows(g.value(z));
            let centers = match self.config.center(self.encoder.config().embedding_dim)? {
                Some(c) => vec![Embedding::new(c.0); chunk.len()],
                None => {
                    let zc = self.encoder.embed(&mut g, &p, feats, spec.context_length)?;
                    rows(g.value(zc))
                }
            };
            let dist = match self.config.objective {
                Objective::Contextual => self.config.distance,
                Objective::FixedCenter { .. } => DistanceKind::Euclidean,
            };
            for (a, b) in z.iter().zip(&centers) {
                let d = distance(dist, a.as_slice(), b.as_slice())?;
                out.push((d, self.config.scoring.probability(d)));
            }
        }
        Ok(out)
    }

    /// [`Detector::rolling_score`] after left-padding by the context length, so the warm-up
    /// prefix is scored too.
    pub fn rolling_score_padded(
        &self,
        series: &TimeSeries,
        spec: WindowSpec,
        aggregation: Aggregation,
    ) -> Result<ScoreTrace> {
        let c = spec.context_length;
        let padded = series.clone().imputed().left_padded(series.len() + c);
        let mut trace = self.rolling_score(&padded, spec, aggregation)?;
        trace.scores.drain(..c);
        trace.probabilities.drain(..c);
        Ok(trace)
    }

    /// Scores every timestep from all suspect windows covering it.
    ///
    /// Windows start at multiples of `spec.stride`, plus one final window ending at the last
    /// timestep when the stride does not land there. Series shorter than the window are
    /// left-padded by edge replication first.
    pub fn rolling_score(&self, series: &TimeSeries, spec: WindowSpec, aggregation: Aggregation) -> Result<ScoreTrace> {
        spec.validate()?;
        let filled;
        let series = if series.has_missing() {
            filled = series.clone().imputed();
            &filled
        } else {
            series
        };
        let len = spec.length();
        let pad = len.saturating_sub(series.len());
        let padded;
        let source = if pad > 0 {
            padded = series.left_padded(len);
            &padded
        } else {
            series
        };
        let total = source.len();
        let mut windows = sliding_windows(source, spec, UnlabeledPolicy::UnlabeledAsNormal)?;
        let last_start = total - len;
        if windows.last().map(|w| w.origin().start) != Some(last_start) {
            windows.extend(sliding_windows(
                &source.slice(last_start, total, source.id())?,
                spec,
                UnlabeledPolicy::UnlabeledAsNormal,
            )?);
        }
        let starts: Vec<usize> = windows
            .iter()
            .enumerate()
            .map(|(i, w)| if i + 1 == windows.len() { last_start } else { w.origin().start })
            .collect();
        let scores = self.score_windows(&windows)?;
        let mut acc = vec![0.0; total];
        let mut count = vec![0usize; total];
        for (start, (score, _)) in starts.iter().zip(scores) {
            for t in start + spec.context_length..start + len {
                acc[t] = match aggregation {
                    Aggregation::Mean => acc[t] + score,
                    Aggregation::MaxFirstAlert if count[t] == 0 => score,
                    Aggregation::MaxFirstAlert => acc[t].max(score),
                };
                count[t] += 1;
            }
        }
        let scores: Vec<Option<f64>> = acc
            .iter()
            .zip(&count)
            .skip(pad)
            .map(|(a, &c)| match (c, aggregation) {
                (0, _) => None,
                (_, Aggregation::Mean) => Some(a / c as f64),
                (_, Aggregation::MaxFirstAlert) => Some(*a),
            })
            .collect();
        let probabilities = scores
            .iter()
            .map(|s| s.map(|s| self.config.scoring.probability(s)))
            .collect();
        Ok(ScoreTrace {
            series_id: series.id().to_string(),
            scores,
            probabilities,
            aggregation,
        })
    }
}
