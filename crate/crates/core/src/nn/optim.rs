//! Adaptive-gradient optimizers (Yogi and Adam).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::{ParameterSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Yogi,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Yogi,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moment accumulators for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    config: OptimizerConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ParameterSet) -> Self {
        let zeros = |p: &ParameterSet| {
            p.iter()
                .map(|(n, t)| (n.to_string(), vec![0.0; t.numel()]))
                .collect::<BTreeMap<_, _>>()
        };
        Self {
            config,
            step: 0,
            first: zeros(params),
            second: zeros(params),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Gradients must cover every parameter with matching sizes.
    ///
    /// `m <- b1 m + (1 - b1) g`; the second moment follows Adam
    /// (`v <- b2 v + (1 - b2) g^2`) or Yogi (`v <- v - (1 - b2) sign(v - g^2) g^2`).
    /// Both are bias-corrected before `p <- p - lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Config(format!("no gradient for parameter `{name}`")))?;
            if g.numel() != p.numel() {
                return Err(Error::DimensionMismatch {
                    expected: p.numel(),
                    got: g.numel(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        self.step += 1;
        let OptimizerConfig {
            kind,
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads[name].data();
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            for (((pi, gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g2 = gi * gi;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = match kind {
                    OptimizerKind::Adam => beta2 * *vi + (1.0 - beta2) * g2,
                    OptimizerKind::Yogi => *vi - (1.0 - beta2) * sign(*vi - g2) * g2,
                };
                let m_hat = *mi / bc1;
                let v_hat = (*vi / bc2).max(0.0);
                *pi -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for t in grads.values_mut() {
            for v in t.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::vector(vec![value])).unwrap();
        p
    }

    fn grad(value: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::vector(vec![value]))])
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Yogi] {
            let mut p = single(0.3);
            let cfg = OptimizerConfig {
                kind,
                ..Default::default()
            };
            let mut st = OptimizerState::new(cfg, &p);
            for _ in 0..3 {
                st.step(&mut p, &grad(0.0)).unwrap();
            }
            assert_eq!(p.get("w").unwrap().item(), 0.3);
        }
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1 at t = 1, so the update is lr / (1 + eps)
        let mut p = single(0.0);
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Adam,
            ..Default::default()
        };
        let mut st = OptimizerState::new(cfg.clone(), &p);
        st.step(&mut p, &grad(1.0)).unwrap();
        let expected = -cfg.learning_rate / (1.0 + cfg.epsilon);
        assert!((p.get("w").unwrap().item() - expected).abs() < 1e-15);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn yogi_and_adam_agree_on_first_step() {
        for g in [0.5, -2.0, 1e-3] {
            let mut a = single(1.0);
            let mut y = single(1.0);
            let mut sa = OptimizerState::new(
                OptimizerConfig {
                    kind: OptimizerKind::Adam,
                    ..Default::default()
                },
                &a,
            );
            let mut sy = OptimizerState::new(OptimizerConfig::default(), &y);
            sa.step(&mut a, &grad(g)).unwrap();
            sy.step(&mut y, &grad(g)).unwrap();
            assert_eq!(a, y);
        }
    }

    #[test]
    fn yogi_diverges_from_adam_later() {
        let mut a = single(1.0);
        let mut y = single(1.0);
        let mut sa = OptimizerState::new(
            OptimizerConfig {
                kind: OptimizerKind::Adam,
                ..Default::default()
            },
            &a,
        );
        let mut sy = OptimizerState::new(OptimizerConfig::default(), &y);
        for g in [1.0, 0.1, 3.0] {
            sa.step(&mut a, &grad(g)).unwrap();
            sy.step(&mut y, &grad(g)).unwrap();
        }
        assert_ne!(a, y);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut p = single(1.0);
        let mut st = OptimizerState::new(OptimizerConfig::default(), &p);
        assert!(matches!(st.step(&mut p, &grad(f64::NAN)), Err(Error::NonFinite(_))));
        assert!(st.step(&mut p, &BTreeMap::new()).is_err());
        assert_eq!(st.step_count(), 0);
        assert_eq!(p.get("w").unwrap().item(), 1.0);
    }

    #[test]
    fn clipping() {
        let mut g = BTreeMap::from([("a".to_string(), Tensor::vector(vec![3.0, 4.0]))]);
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g["a"].data(), &[3.0, 4.0]);
        clip_global_norm(&mut g, 1.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-12);
    }
}
