//! AdamW with decoupled weight decay and a warmup + cosine learning-rate
//! schedule.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    /// Linear ramp from `warmup_lr` to `base_lr` over the warmup steps, then
    /// a half cosine down to `min_lr` at `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            return self.warmup_lr + (self.base_lr - self.warmup_lr) * t;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.base_lr;
        }
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<F: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Option<Tensor<F>>>,
    v: Vec<Option<Tensor<F>>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter that has a gradient. Decay
    /// is skipped for parameters the store marks as no-decay.
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &[(ParamId, Tensor<F>)],
        lr: f64,
    ) -> Result<()> {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let (one, eps) = (F::one(), F::lit(self.eps));
        let (step_size, bc2_sqrt) = (F::lit(lr / bc1), F::lit(bc2.sqrt()));
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let decay = if store.decays(*id) {
                F::lit(1.0 - lr * self.weight_decay)
            } else {
                one
            };
            let w = store.get_mut(*id);
            if w.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    lhs: w.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let iter = w
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
                .zip(g.data());
            for (((w, m), v), &g) in iter {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w = *w * decay - step_size * *m / (v.sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}
