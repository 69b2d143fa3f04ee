use std::ops::Range;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// L2 penalty coefficient added to the clipped gradient.
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            clip_norm: Some(1.0),
            weight_decay: 0.0,
        }
    }
}

/// Gradient descent with heavy-ball momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum {
    pub cfg: OptimConfig,
    velocity: Vec<f64>,
}

impl Momentum {
    pub fn new(cfg: OptimConfig, n: usize) -> Self {
        Self {
            cfg,
            velocity: vec![0.0; n],
        }
    }

    /// Resumes from saved velocity.
    pub fn with_velocity(cfg: OptimConfig, velocity: Vec<f64>) -> Self {
        Self { cfg, velocity }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    /// Applies one step in place and returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> f64 {
        self.step_except(params, grad, &[])
    }

    /// Like `step`, but leaves parameters (and their velocity) inside the
    /// `frozen` ranges untouched, weight decay included. The clip norm is
    /// taken over the remaining entries.
    pub fn step_except(&mut self, params: &mut [f64], grad: &[f64], frozen: &[Range<usize>]) -> f64 {
        assert_eq!(params.len(), grad.len(), "optimizer: gradient length");
        let live = |i: usize| !frozen.iter().any(|r| r.contains(&i));
        let norm = grad
            .iter()
            .enumerate()
            .filter(|(i, _)| live(*i))
            .map(|(_, g)| g * g)
            .sum::<f64>()
            .sqrt();
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (i, ((p, v), g)) in params.iter_mut().zip(&mut self.velocity).zip(grad).enumerate() {
            if !live(i) {
                continue;
            }
            *v = self.cfg.momentum * *v + scale * g + self.cfg.weight_decay * *p;
            *p -= self.cfg.lr * *v;
        }
        norm
    }
}
