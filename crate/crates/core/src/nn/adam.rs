use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Bias-corrected Adam moments for every tensor in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .tensors()
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn check(&self, store: &ParamStore, grads: &[Tensor], lr: f32) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if grads.len() != store.len() || self.m.len() != store.len() || self.v.len() != store.len()
        {
            return Err(Error::Invalid(format!(
                "optimizer holds {} moments, store has {} params, got {} grads",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in store.tensors().iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].shape() != p.shape() {
                return Err(shape_err("optimizer_step", p.shape(), g.shape()));
            }
        }
        for (id, g) in store.ids().zip(grads) {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
            }
        }
        Ok(())
    }

    /// One Adam update over every parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f32) -> Result<()> {
        self.step_masked(store, grads, lr, |_| true)
    }

    /// Updates only parameters whose name satisfies `trainable`; moments of
    /// frozen parameters are left untouched. Nothing is modified on error.
    pub fn step_masked(
        &mut self,
        store: &mut ParamStore,
        grads: &[Tensor],
        lr: f32,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        self.check(store, grads, lr)?;
        self.step += 1;
        let t = self.step as f32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - libm::powf(b1, t);
        let c2 = 1.0 - libm::powf(b2, t);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if !trainable(store.name(id)) {
                continue;
            }
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (libm::sqrtf(vh) + self.eps);
            }
        }
        Ok(())
    }
}
