//! AdamW and the warmup-then-cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::params::{Gradients, ParamStore};
use crate::tensor::Matrix;

/// Adam with decoupled weight decay, applied only to parameters flagged
/// for decay in the store.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Matrix> = store
            .ids()
            .map(|id| {
                let (r, c) = store.value(id).shape();
                Matrix::zeros(r, c)
            })
            .collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let decay = if store.decays(id) { lr * self.weight_decay } else { 0.0 };
            let g = grads.get(id).as_slice();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            let p = store.value_mut(id).as_mut_slice();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                p[j] -= decay * p[j] + lr * update;
            }
        }
    }
}

/// Linear warmup from 0 to `peak`, then cosine annealing to 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let decay_steps = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / decay_steps as f64).min(1.0);
        0.5 * self.peak * (1.0 + (PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = LrSchedule { peak: 1e-3, warmup_steps: 10, total_steps: 110 };
        assert_eq!(s.at(0), 0.0);
        assert!((s.at(5) - 5e-4).abs() < 1e-15);
        assert_eq!(s.at(10), 1e-3);
        assert!((s.at(60) - 5e-4).abs() < 1e-12);
        assert!(s.at(110).abs() < 1e-15);
        let no_warmup = LrSchedule { peak: 2.0, warmup_steps: 0, total_steps: 4 };
        assert_eq!(no_warmup.at(0), 2.0);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::default();
        let w = store.add("w", Matrix::row_vector(vec![1.0, -2.0]), true);
        let b = store.add("b", Matrix::row_vector(vec![3.0]), false);
        let mut grads = Gradients::zeros_like(&store);
        grads.get_mut(w).as_mut_slice().copy_from_slice(&[0.5, -4.0]);
        grads.get_mut(b).as_mut_slice()[0] = 1e-3;
        let mut opt = AdamW::new(&store, 0.1);
        opt.update(&mut store, &grads, 0.01);
        // Bias-corrected first step is sign(g) * lr, plus decay on decaying tensors.
        let wv = store.value(w).as_slice();
        assert!((wv[0] - (1.0 - 0.001 - 0.01)).abs() < 1e-9);
        assert!((wv[1] - (-2.0 + 0.002 + 0.01)).abs() < 1e-9);
        assert!((store.value(b).item() - (3.0 - 0.01)).abs() < 1e-6);
    }
}
