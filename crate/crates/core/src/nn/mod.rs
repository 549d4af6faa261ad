//! Model components: layers, image and question encoders, heads, optimizer.

mod adam;
mod encoder;
mod heads;
mod question;

pub use adam::AdamState;
pub use encoder::{EncoderConfig, ImageEncoder};
pub use heads::{ClassifierHead, EnergyHead, HeadInit, ProjectionHead};
pub use question::{QuestionEncoder, QuestionEncoderConfig, PAD};

use alloc::format;
use alloc::vec;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{numel, Tensor};

/// Gaussian weights with fan-in scaling `sqrt(gain / fan_in)`.
pub(crate) fn kaiming<R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
    gain: f32,
) -> Tensor {
    let std = libm::sqrtf(gain / fan_in.max(1) as f32);
    Tensor::from_fn(shape, |_| {
        let z: f32 = StandardNormal.sample(rng);
        z * std
    })
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
        gain: f32,
    ) -> Self {
        let w = kaiming(rng, &[inputs, outputs], inputs, gain);
        Self::from_weight(store, name, w)
    }

    pub fn zeros(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Self {
        Self::from_weight(store, name, Tensor::zeros(&[inputs, outputs]))
    }

    fn from_weight(store: &mut ParamStore, name: &str, w: Tensor) -> Self {
        let (inputs, outputs) = (w.shape()[0], w.shape()[1]);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, x: Var) -> Result<Var> {
        let s = t.shape(x);
        if s.len() != 2 || s[1] != self.inputs {
            return Err(shape_err("linear", s, &[self.inputs, self.outputs]));
        }
        let h = t.matmul(x, t.param(self.weight))?;
        t.add(h, t.param(self.bias))
    }
}

/// Bias-free 2-D convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        size: usize,
        stride: usize,
        rng: &mut R,
        gain: f32,
    ) -> Self {
        let shape = [cout, cin, size, size];
        let k = kaiming(rng, &shape, numel(&shape[1..]), gain);
        Self {
            kernel: store.add(format!("{name}.weight"), k),
            stride,
            pad: size / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, x: Var) -> Result<Var> {
        t.conv2d(x, t.param(self.kernel), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups: groups.min(channels).max(1),
        }
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, x: Var) -> Result<Var> {
        t.group_norm(x, t.param(self.gamma), t.param(self.beta), self.groups)
    }
}

/// Runs `f` on a tape with `store` bound as constants and returns the output value.
pub fn eval_with<F>(store: &ParamStore, f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Tape<f32>) -> Result<Var>,
{
    let mut t = Tape::new();
    t.bind(store, false);
    let y = f(&mut t)?;
    Ok(t.value(y).clone())
}

/// Mean softmax cross-entropy against integer targets.
pub fn cross_entropy_indices<T: Scalar>(
    t: &mut Tape<T>,
    logits: Var,
    targets: &[usize],
) -> Result<Var> {
    let s = t.shape(logits).to_vec();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(shape_err("cross_entropy", &s, &[targets.len()]));
    }
    let (n, a) = (s[0], s[1]);
    let mut onehot = vec![T::zero(); n * a];
    for (i, &y) in targets.iter().enumerate() {
        if y >= a {
            return Err(crate::Error::Index { index: y, size: a });
        }
        onehot[i * a + y] = T::one();
    }
    let oh = t.constant(Tensor::new(vec![n, a], onehot)?);
    let lp = t.log_softmax(logits, 1)?;
    let picked = t.mul(lp, oh)?;
    let s = t.sum(picked)?;
    t.scale(s, -T::one() / T::c(n.max(1) as f64))
}
