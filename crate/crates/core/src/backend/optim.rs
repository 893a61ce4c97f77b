use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Float, ParameterStore, Result, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-4,
            warmup_steps: 1000,
            total_steps: 100_000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

impl AdamConfig {
    /// Learning rate for update number `step` (1-based): linear warmup to
    /// `peak_lr`, then linear decay to zero at `total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let s = step as f64;
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            (s / self.warmup_steps as f64).min(1.0)
        };
        let decay_span = self.total_steps.saturating_sub(self.warmup_steps);
        let decay = if step >= self.total_steps {
            0.0
        } else if decay_span == 0 {
            1.0
        } else {
            let past = step.saturating_sub(self.warmup_steps) as f64;
            (1.0 - past / decay_span as f64).max(0.0)
        };
        (self.peak_lr * warm * decay).max(0.0)
    }
}

pub fn global_grad_norm<T: Float>(store: &ParameterStore<T>) -> f64 {
    store
        .names()
        .filter_map(|n| store.grad(n))
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let v = v.to_f64().unwrap();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Adam with bias correction and the warmup/linear-decay schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate that the next call to [`Adam::step`] will use.
    pub fn next_lr(&self) -> f64 {
        self.config.lr_at(self.step + 1)
    }

    /// Applies one update from the gradients in `store`, then zeroes them.
    /// Returns the learning rate used.
    pub fn step(&mut self, store: &mut ParameterStore<T>) -> f64 {
        self.step += 1;
        let t = self.step as i32;
        let lr = self.config.lr_at(self.step);
        let clip = match self.config.clip_norm {
            Some(max) => {
                let norm = global_grad_norm(store);
                if norm > max && norm > 0.0 {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let eps = self.config.eps;
        for (name, value, grad) in store.iter_with_grads_mut() {
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(value.shape()));
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(value.shape()));
            for (((p, g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data_mut().iter_mut())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                let gd = g.to_f64().unwrap() * clip;
                let mn = b1 * mi.to_f64().unwrap() + (1.0 - b1) * gd;
                let vn = b2 * vi.to_f64().unwrap() + (1.0 - b2) * gd * gd;
                *mi = T::lit(mn);
                *vi = T::lit(vn);
                let update = lr * (mn / bc1) / ((vn / bc2).sqrt() + eps);
                *p = T::lit(p.to_f64().unwrap() - update);
                *g = T::zero();
            }
        }
        lr
    }

    /// Moment buffers as named tensors (`opt.m.<param>`, `opt.v.<param>`).
    pub fn state_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (k, m) in &self.first {
            out.push((format!("opt.m.{k}"), m.clone()));
        }
        for (k, v) in &self.second {
            out.push((format!("opt.v.{k}"), v.clone()));
        }
        out
    }

    /// Rebuilds optimizer state from [`Adam::state_tensors`] output.
    pub fn from_state(config: AdamConfig, step: u64, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut adam = Self::new(config);
        adam.step = step;
        for (name, t) in tensors {
            if let Some(p) = name.strip_prefix("opt.m.") {
                adam.first.insert(p.to_string(), t);
            } else if let Some(p) = name.strip_prefix("opt.v.") {
                adam.second.insert(p.to_string(), t);
            } else {
                return Err(super::BackendError::Checkpoint(format!(
                    "unexpected optimizer entry `{name}`"
                )));
            }
        }
        Ok(adam)
    }
}
