use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Real, Tensor};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, hyper: AdamHyper) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.rows, t.cols)).collect();
        Self { hyper, step: 0, m: zeros(), v: zeros() }
    }

    /// One update; `grads[i]` belongs to parameter `i` (missing means zero).
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        assert_eq!(grads.len(), self.m.len(), "one gradient slot per parameter");
        self.step += 1;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.step as i32);
        let bc2 = 1.0 - h.beta2.powi(self.step as i32);
        let (b1, b2) = (T::c(h.beta1), T::c(h.beta2));
        let (lr, eps, decay) = (T::c(h.lr), T::c(h.eps), T::c(1.0 - h.lr * h.weight_decay));
        let (c1, c2) = (T::c(1.0 / bc1), T::c(1.0 / bc2));
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.data.len() {
                let gk = grads[i].as_ref().map_or(T::zero(), |g| g.data[k]);
                m.data[k] = b1 * m.data[k] + (T::one() - b1) * gk;
                v.data[k] = b2 * v.data[k] + (T::one() - b2) * gk * gk;
                let upd = (m.data[k] * c1) / ((v.data[k] * c2).sqrt() + eps);
                p.data[k] = p.data[k] * decay - lr * upd;
            }
        }
    }
}
