use alloc::format;

use rand::Rng;

use super::Linear;
use crate::error::Result;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadInit {
    Kaiming,
    /// Output layer starts at zero: energies are 0 and logits uniform.
    Zero,
}

/// Contrastive projection head: linear, ReLU, linear.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    hidden: Linear,
    out: Linear,
}

impl ProjectionHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{prefix}.hidden"), input, hidden, rng, 2.0),
            out: Linear::new(store, &format!("{prefix}.out"), hidden, output, rng, 1.0),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.out.outputs
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(t, x)?;
        let h = t.relu(h)?;
        self.out.forward(t, h)
    }
}

/// Single affine map from an embedding to one scalar energy per example.
#[derive(Clone, Debug)]
pub struct EnergyHead {
    pub linear: Linear,
}

impl EnergyHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        init: HeadInit,
        rng: &mut R,
    ) -> Self {
        let linear = match init {
            HeadInit::Kaiming => Linear::new(store, prefix, input, 1, rng, 1.0),
            HeadInit::Zero => Linear::zeros(store, prefix, input, 1),
        };
        Self { linear }
    }

    pub fn input_dim(&self) -> usize {
        self.linear.inputs
    }

    /// `[N, d] -> [N]`.
    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, emb: Var) -> Result<Var> {
        let e = self.linear.forward(t, emb)?;
        let n = t.shape(e)[0];
        t.reshape(e, &[n])
    }
}

/// `f_CLS`: two-layer MLP from the fused representation to answer logits.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    hidden: Linear,
    out: Linear,
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        answers: usize,
        init: HeadInit,
        rng: &mut R,
    ) -> Self {
        let hidden_layer = Linear::new(store, &format!("{prefix}.hidden"), input, hidden, rng, 2.0);
        let out = match init {
            HeadInit::Kaiming => {
                Linear::new(store, &format!("{prefix}.out"), hidden, answers, rng, 1.0)
            }
            HeadInit::Zero => Linear::zeros(store, &format!("{prefix}.out"), hidden, answers),
        };
        Self {
            hidden: hidden_layer,
            out,
        }
    }

    pub fn answers(&self) -> usize {
        self.out.outputs
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.inputs
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, fused: Var) -> Result<Var> {
        let h = self.hidden.forward(t, fused)?;
        let h = t.relu(h)?;
        self.out.forward(t, h)
    }
}
