//! Adam with optional frozen parameters.

use crate::numerics::{ParamGrads, ParamStore, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed update steps.
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    /// Parameters the optimizer never touches.
    pub frozen: Vec<bool>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, lr: f64) -> Self {
        let zeros: Vec<Tensor<S>> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
            frozen: vec![false; store.len()],
        }
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, store: &ParamStore<S>, prefix: &str) {
        for (id, name, _) in store.iter() {
            if name.starts_with(prefix) {
                self.frozen[id.index()] = true;
            }
        }
    }

    pub fn update(&mut self, store: &mut ParamStore<S>, grads: &ParamGrads<S>) {
        self.step += 1;
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let one = S::one();
        let c1 = S::lit(1.0 - self.beta1.powi(self.step as i32));
        let c2 = S::lit(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (S::lit(self.lr), S::lit(self.eps));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            if self.frozen[i] {
                continue;
            }
            let g = grads.get(id).data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
