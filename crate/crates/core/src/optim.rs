//! Adaptive-moment optimiser and the polynomial learning-rate schedule.

use crate::autograd::Gradients;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `base · (1 − iter / max_iter)^power`, zero once `iter ≥ max_iter`.
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if max_iter == 0 || iter >= max_iter {
        return 0.0;
    }
    base * (1.0 - iter as f64 / max_iter as f64).powf(power)
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
    /// Updates applied so far.
    pub t: u64,
    /// First and second moments, indexed by parameter id; empty for buffers.
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let zeros = |id: ParamId| match store.kind(id) {
            ParamKind::Trainable => Tensor::zeros(store.get(id).shape()),
            ParamKind::Buffer => Tensor::zeros(&[0]),
        };
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
        }
    }

    /// One bias-corrected update. Parameters without a gradient keep their
    /// value but their moments still decay.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = T::c(lr / c1);
        let c2 = T::c(c2);
        let eps = T::c(self.eps);
        let wd = T::c(self.weight_decay);
        let ids: Vec<_> = store.trainable_ids().collect();
        for id in ids {
            let grad = grads.param(id);
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = grad.map_or(T::zero(), |g| g.data()[i]) + wd * p[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                p[i] -= step * m[i] / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}
