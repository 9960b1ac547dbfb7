//! First-order optimizers over flat parameter slices.
//!
//! Models expose their tensors as an ordered list of `&mut [f32]`; gradients
//! come in the same order. Optimizer state is indexed by that position.

use serde::{Deserialize, Serialize};

/// A model whose trainable tensors can be visited in a fixed order.
pub trait Parameters {
    fn param_slices(&self) -> Vec<&[f32]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f32]>;

    fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates shared by Adam and Lamb.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MomentState {
    pub step: u64,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

impl MomentState {
    fn ensure_shape(&mut self, grads: &[&[f32]]) {
        if self.first.len() != grads.len()
            || self.first.iter().zip(grads).any(|(m, g)| m.len() != g.len())
        {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
            self.step = 0;
        }
    }

    /// Updates both moments with `grads` and returns the bias corrections
    /// `(1 - beta1^t, 1 - beta2^t)`.
    fn accumulate(&mut self, grads: &[&[f32]], beta1: f64, beta2: f64) -> (f64, f64) {
        self.ensure_shape(grads);
        self.step += 1;
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        for ((m, v), g) in self.first.iter_mut().zip(&mut self.second).zip(grads) {
            for ((m, v), &g) in m.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
            }
        }
        let t = self.step as i32;
        (1.0 - beta1.powi(t), 1.0 - beta2.powi(t))
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: MomentState,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: MomentState::default(),
        }
    }

    pub fn step<P: Parameters + ?Sized>(&mut self, model: &mut P, grads: &[&[f32]]) {
        let lr = self.config.learning_rate;
        self.step_with_lr(model, grads, lr);
    }

    pub fn step_with_lr<P: Parameters + ?Sized>(&mut self, model: &mut P, grads: &[&[f32]], lr: f64) {
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
            ..
        } = self.config;
        let (c1, c2) = self.state.accumulate(grads, beta1, beta2);
        let step_size = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let eps = epsilon as f32;
        let params = model.param_slices_mut();
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        for ((p, m), v) in params.into_iter().zip(&self.state.first).zip(&self.state.second) {
            for ((p, &m), &v) in p.iter_mut().zip(m).zip(v) {
                *p -= step_size * m / (v.sqrt() / c2_sqrt + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for LambConfig {
    fn default() -> Self {
        LambConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-6,
            weight_decay: 0.0,
        }
    }
}

/// Layer-wise adaptive moments: the Adam direction for each tensor is rescaled
/// so that the step length is proportional to that tensor's norm.
#[derive(Debug, Clone)]
pub struct Lamb {
    pub config: LambConfig,
    pub state: MomentState,
}

impl Lamb {
    pub fn new(config: LambConfig) -> Self {
        Lamb {
            config,
            state: MomentState::default(),
        }
    }

    pub fn step_with_lr<P: Parameters + ?Sized>(&mut self, model: &mut P, grads: &[&[f32]], lr: f64) {
        let LambConfig {
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let (c1, c2) = self.state.accumulate(grads, beta1, beta2);
        let params = model.param_slices_mut();
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        let mut update = Vec::new();
        for ((p, m), v) in params.into_iter().zip(&self.state.first).zip(&self.state.second) {
            update.clear();
            update.extend(p.iter().zip(m).zip(v).map(|((&p, &m), &v)| {
                let m_hat = m as f64 / c1;
                let v_hat = v as f64 / c2;
                m_hat / (v_hat.sqrt() + epsilon) + weight_decay * p as f64
            }));
            let w_norm = p.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let u_norm = update.iter().map(|x| x * x).sum::<f64>().sqrt();
            let trust = if w_norm > 0.0 && u_norm > 0.0 {
                w_norm / u_norm
            } else {
                1.0
            };
            let scale = lr * trust;
            for (p, u) in p.iter_mut().zip(&update) {
                *p -= (scale * u) as f32;
            }
        }
    }
}

/// Cosine annealing from `max_lr` at step 0 to `min_lr` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, max_lr: f64, min_lr: f64) -> f64 {
    if total_steps <= 1 {
        return max_lr;
    }
    let t = (step.min(total_steps - 1)) as f64 / (total_steps - 1) as f64;
    min_lr + 0.5 * (max_lr - min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}
