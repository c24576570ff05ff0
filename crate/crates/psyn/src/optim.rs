//! Adam with the Transformer warmup-then-inverse-sqrt learning rate
//! schedule (beta1 = 0.9, beta2 = 0.98, eps = 1e-9).

use crate::params::{ParamGroup, ParamStore};

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.98;
pub const ADAM_EPS: f32 = 1e-9;

/// lr(step) = factor * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)
pub fn noam_lr(step: u64, d_model: usize, warmup: u64, factor: f32) -> f32 {
    let step = step.max(1) as f64;
    let warmup = warmup.max(1) as f64;
    let scale = (d_model as f64).powf(-0.5);
    (factor as f64 * scale * (step.powf(-0.5)).min(step * warmup.powf(-1.5))) as f32
}

pub struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            m: store.entries().iter().map(|e| vec![0.0; e.data.len()]).collect(),
            v: store.entries().iter().map(|e| vec![0.0; e.data.len()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads` is aligned with the store's registration
    /// order; entries outside `group` (when given) are left untouched, as
    /// are entries without a gradient.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Vec<f32>>],
        lr: f32,
        group: Option<ParamGroup>,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (idx, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            if let Some(want) = group {
                if store.entries()[idx].group != want {
                    continue;
                }
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = store.data_mut(idx);
            for i in 0..g.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }

    /// Flatten optimizer state for checkpointing: (m tensors, v tensors, step).
    pub fn state(&self) -> (&[Vec<f32>], &[Vec<f32>], u64) {
        (&self.m, &self.v, self.step)
    }

    pub fn restore(store: &ParamStore, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>, step: u64) -> Self {
        debug_assert_eq!(m.len(), store.len());
        debug_assert_eq!(v.len(), store.len());
        Adam { m, v, step }
    }
}
