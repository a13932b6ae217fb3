//! AdamW with decoupled weight decay, and the warmup + half-cosine schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub weight_decay: Float,
    pub beta1: Float,
    pub beta2: Float,
    pub eps: Float,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: first and second moments per parameter, plus the step
/// count used for bias correction.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        Self {
            config,
            first: vec![None; store.len()],
            second: vec![None; store.len()],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update with learning rate `lr`. Parameters without a
    /// gradient are left untouched. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: Float) -> Result<()> {
        for (id, g) in grads {
            if !g.all_finite() {
                return Err(Error::Numerics(format!("gradient of {} is not finite", store.name(*id))));
            }
            if g.shape() != store.get(*id).shape() {
                return Err(Error::shape("adamw", g.shape(), store.get(*id).shape()));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in grads {
            let i = id.index();
            let shape = g.shape().to_vec();
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(&shape));
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(&shape));
            let p = store.get_mut(*id);
            for (((p, g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *p -= lr * (c.weight_decay * *p + update);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then half-cycle
/// cosine decay to 0 at `total_steps`.
pub fn cosine_schedule(step: u64, warmup_steps: u64, total_steps: u64, base_lr: Float) -> Result<Float> {
    if warmup_steps > total_steps {
        return Err(Error::Config(format!(
            "warmup ({warmup_steps}) exceeds total steps ({total_steps})"
        )));
    }
    let step = step.min(total_steps);
    if step < warmup_steps {
        return Ok(base_lr * step as Float / warmup_steps as Float);
    }
    let span = total_steps - warmup_steps;
    let progress = if span == 0 {
        1.0
    } else {
        (step - warmup_steps) as f64 / span as f64
    };
    Ok((0.5 * base_lr as f64 * (1.0 + (PI * progress).cos())) as Float)
}
