//! Adam with decoupled weight decay, and a reduce-on-plateau schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-6,
        }
    }
}

/// Learning rate and weight decay of one parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    pub lr: f64,
    pub weight_decay: f64,
}

impl GroupConfig {
    pub const CLASSIFIER: GroupConfig = GroupConfig {
        lr: 1e-4,
        weight_decay: 5e-5,
    };
    pub const QUANTIZER: GroupConfig = GroupConfig {
        lr: 5e-5,
        weight_decay: 1e-5,
    };
    /// Rates for the synthetic toy task. Weight decays match the defaults above.
    pub const TOY_CLASSIFIER: GroupConfig = GroupConfig {
        lr: 3e-3,
        weight_decay: 5e-5,
    };
    pub const TOY_QUANTIZER: GroupConfig = GroupConfig {
        lr: 1.5e-3,
        weight_decay: 1e-5,
    };
}

/// First and second moment estimates for every tensor of a group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn for_shapes(shapes: &[(usize, usize)]) -> Self {
        Self {
            step: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }
}

/// One bias-corrected Adam update over a parameter group:
///
/// `p ← p − lr · (m̂ / (√v̂ + ε) + λ p)`
pub fn adam_step(
    params: &mut [&mut Matrix],
    grads: &[&Matrix],
    state: &mut AdamState,
    adam: &AdamConfig,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::ShapeMismatch {
            expected: (params.len(), 0),
            found: (grads.len(), state.m.len()),
        });
    }
    for ((p, g), (m, v)) in params.iter().zip(grads).zip(state.m.iter().zip(&state.v)) {
        for shape in [g.shape(), m.shape(), v.shape()] {
            if shape != p.shape() {
                return Err(Error::ShapeMismatch {
                    expected: p.shape(),
                    found: shape,
                });
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - adam.beta1.powi(t);
    let bc2 = 1.0 - adam.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let pv = p.as_mut_slice();
        let gv = g.as_slice();
        let mv = m.as_mut_slice();
        let vv = v.as_mut_slice();
        for i in 0..pv.len() {
            mv[i] = adam.beta1 * mv[i] + (1.0 - adam.beta1) * gv[i];
            vv[i] = adam.beta2 * vv[i] + (1.0 - adam.beta2) * gv[i] * gv[i];
            let m_hat = mv[i] / bc1;
            let v_hat = vv[i] / bc2;
            pv[i] -= lr * (m_hat / (v_hat.sqrt() + adam.eps) + weight_decay * pv[i]);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.7,
            patience: 2,
            threshold: 1e-4,
        }
    }
}

/// Multiplies the learning-rate scale by `factor` once the monitored loss has
/// failed to beat `best − threshold` for more than `patience` epochs in a row.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    config: PlateauConfig,
    best: f64,
    bad_epochs: usize,
    scale: f64,
}

impl PlateauScheduler {
    pub fn new(config: PlateauConfig) -> Self {
        Self {
            config,
            best: f64::INFINITY,
            bad_epochs: 0,
            scale: 1.0,
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Records one epoch's metric and returns the (possibly reduced) scale.
    pub fn step(&mut self, metric: f64) -> f64 {
        if metric < self.best - self.config.threshold {
            self.best = metric;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > self.config.patience {
            self.scale *= self.config.factor;
            self.bad_epochs = 0;
        }
        self.scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decays(trace: &[f64]) -> Vec<usize> {
        let mut s = PlateauScheduler::new(PlateauConfig::default());
        let mut out = Vec::new();
        let mut prev = 1.0;
        for (epoch, &m) in trace.iter().enumerate() {
            let scale = s.step(m);
            if scale < prev {
                out.push(epoch);
            }
            prev = scale;
        }
        out
    }

    #[test]
    fn plateau_traces() {
        assert!(decays(&[1.0, 0.5, 0.3]).is_empty());
        assert_eq!(decays(&[1.0, 1.0, 1.0, 1.0]), vec![3]);
        let mut s = PlateauScheduler::new(PlateauConfig::default());
        for _ in 0..4 {
            s.step(1.0);
        }
        assert!((s.scale() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn improvement_equal_to_threshold_does_not_count() {
        let t = PlateauConfig::default().threshold;
        let best = 1.0;
        let trace = [best, best - t, best - t, best - t];
        assert_eq!(decays(&trace), vec![3]);
        // Slightly more than the threshold does count.
        assert!(decays(&[best, best - 2.0 * t, best - 4.0 * t, best - 6.0 * t]).is_empty());
    }

    #[test]
    fn zero_gradient_without_decay_is_a_noop() {
        let mut p = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap();
        let before = p.clone();
        let g = Matrix::zeros(2, 2);
        let mut st = AdamState::for_shapes(&[(2, 2)]);
        for _ in 0..10 {
            adam_step(&mut [&mut p], &[&g], &mut st, &AdamConfig::default(), 1e-2, 0.0).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_step_approaches_lr() {
        let lr = 1e-3;
        let mut p = Matrix::zeros(1, 1);
        let mut g = Matrix::zeros(1, 1);
        g[(0, 0)] = 0.37;
        let mut st = AdamState::for_shapes(&[(1, 1)]);
        let mut last_delta = 0.0;
        for _ in 0..2000 {
            let before = p[(0, 0)];
            adam_step(&mut [&mut p], &[&g], &mut st, &AdamConfig::default(), lr, 0.0).unwrap();
            last_delta = before - p[(0, 0)];
        }
        // m̂ = g and v̂ = g² exactly for constant g, so the step is lr·g/(|g|+ε).
        let want = lr * 0.37 / (0.37 + 1e-6);
        assert!((last_delta - want).abs() < 1e-12, "{last_delta}");
    }

    #[test]
    fn quadratic_bowl_descends() {
        let mut p = Matrix::from_rows(&[[1.5, -0.8, 0.3]]).unwrap();
        let mut st = AdamState::for_shapes(&[(1, 3)]);
        let mut norms = Vec::new();
        for _ in 0..200 {
            let g = p.scaled(2.0);
            adam_step(&mut [&mut p], &[&g], &mut st, &AdamConfig::default(), 1e-2, 0.0).unwrap();
            norms.push(crate::numerics::norm(p.as_slice()));
        }
        assert!(norms.windows(2).skip(5).all(|w| w[1] < w[0]));
        assert!(norms[199] < 0.5 * norms[0]);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut p = Matrix::from_rows(&[[2.0]]).unwrap();
        let g = Matrix::zeros(1, 1);
        let mut st = AdamState::for_shapes(&[(1, 1)]);
        adam_step(&mut [&mut p], &[&g], &mut st, &AdamConfig::default(), 0.1, 0.5).unwrap();
        assert!((p[(0, 0)] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Matrix::zeros(2, 2);
        let g = Matrix::zeros(2, 3);
        let mut st = AdamState::for_shapes(&[(2, 2)]);
        assert!(matches!(
            adam_step(&mut [&mut p], &[&g], &mut st, &AdamConfig::default(), 1e-3, 0.0),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
