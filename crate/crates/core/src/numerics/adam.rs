use std::collections::HashMap;

use super::{Gradients, ParamId, ParamStore};

/// Adaptive-moment gradient descent with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter present in `grads` and accepted by `filter`.
    pub fn step_filtered(&mut self, store: &mut ParamStore, grads: &Gradients, filter: impl Fn(ParamId) -> bool) {
        let updates: Vec<(ParamId, Vec<f64>)> =
            grads.params().filter(|(id, _)| filter(*id)).map(|(id, g)| (id, g.data().to_vec())).collect();
        self.apply(store, updates);
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step_filtered(store, grads, |_| true);
    }

    /// Update from explicit `(param, gradient)` pairs, e.g. gradients averaged over a batch.
    pub fn apply(&mut self, store: &mut ParamStore, grads: Vec<(ParamId, Vec<f64>)>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut grads = grads;
        grads.sort_by_key(|(id, _)| *id);
        for (id, g) in grads {
            let param = store.get_mut(id);
            let dtype = param.dtype();
            let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (i, p) in param.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *p = dtype.round(*p - self.lr * mhat / (vhat.sqrt() + self.eps));
            }
        }
    }
}
