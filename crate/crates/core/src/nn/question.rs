use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::kaiming;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Index reserved for padding; masked out of the recurrence.
pub const PAD: usize = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct QuestionEncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl QuestionEncoderConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 32,
            hidden_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(
                "question encoder needs vocab >= 2 and positive dims".into(),
            ));
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvMap, prefix: &str) {
        kv.set(format!("{prefix}.vocab_size"), self.vocab_size);
        kv.set(format!("{prefix}.embed_dim"), self.embed_dim);
        kv.set(format!("{prefix}.hidden_dim"), self.hidden_dim);
    }

    pub fn read_kv(kv: &KvMap, prefix: &str) -> Result<Self> {
        Ok(Self {
            vocab_size: kv.get(&format!("{prefix}.vocab_size"))?,
            embed_dim: kv.get(&format!("{prefix}.embed_dim"))?,
            hidden_dim: kv.get(&format!("{prefix}.hidden_dim"))?,
        })
    }
}

/// `f_Q`: token sequences to the final hidden state of a gated recurrent unit.
#[derive(Clone, Debug)]
pub struct QuestionEncoder {
    cfg: QuestionEncoderConfig,
    table: ParamId,
    w_in: ParamId,
    w_hid: ParamId,
    b_in: ParamId,
    b_hid: ParamId,
}

impl QuestionEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &QuestionEncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (e, h) = (cfg.embed_dim, cfg.hidden_dim);
        let table = store.add(
            format!("{prefix}.embedding"),
            kaiming(rng, &[cfg.vocab_size, e], 1, 1.0),
        );
        let w_in = store.add(format!("{prefix}.w_in"), kaiming(rng, &[e, 3 * h], e, 1.0));
        let w_hid = store.add(format!("{prefix}.w_hid"), kaiming(rng, &[h, 3 * h], h, 1.0));
        let b_in = store.add(format!("{prefix}.b_in"), Tensor::zeros(&[3 * h]));
        let b_hid = store.add(format!("{prefix}.b_hid"), Tensor::zeros(&[3 * h]));
        Ok(Self {
            cfg: cfg.clone(),
            table,
            w_in,
            w_hid,
            b_in,
            b_hid,
        })
    }

    pub fn config(&self) -> &QuestionEncoderConfig {
        &self.cfg
    }

    pub fn hidden_dim(&self) -> usize {
        self.cfg.hidden_dim
    }

    /// Encodes a batch of token sequences. Sequences may have different
    /// lengths; they are padded internally and padding never touches the state.
    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, batch: &[Vec<usize>]) -> Result<Var> {
        let h_dim = self.cfg.hidden_dim;
        let n = batch.len();
        for seq in batch {
            for &tok in seq {
                if tok >= self.cfg.vocab_size {
                    return Err(Error::Index {
                        index: tok,
                        size: self.cfg.vocab_size,
                    });
                }
            }
        }
        let mut h = t.constant(Tensor::zeros(&[n, h_dim]));
        if n == 0 {
            return Ok(h);
        }
        let max_len = batch.iter().map(Vec::len).max().unwrap_or(0);
        let (table, w_in, w_hid) = (t.param(self.table), t.param(self.w_in), t.param(self.w_hid));
        let (b_in, b_hid) = (t.param(self.b_in), t.param(self.b_hid));
        for step in 0..max_len {
            let tokens: Vec<usize> = batch
                .iter()
                .map(|s| s.get(step).copied().unwrap_or(PAD))
                .collect();
            let active: Vec<T> = batch
                .iter()
                .map(|s| match s.get(step) {
                    Some(&tok) if tok != PAD => T::one(),
                    _ => T::zero(),
                })
                .collect();
            if active.iter().all(|&a| a == T::zero()) {
                continue;
            }
            let x = t.embedding(table, &tokens)?;
            let gx = t.matmul(x, w_in)?;
            let gx = t.add(gx, b_in)?;
            let gh = t.matmul(h, w_hid)?;
            let gh = t.add(gh, b_hid)?;
            let (xr, xz, xn) = (
                t.slice(gx, 1, 0, h_dim)?,
                t.slice(gx, 1, h_dim, 2 * h_dim)?,
                t.slice(gx, 1, 2 * h_dim, 3 * h_dim)?,
            );
            let (hr, hz, hn) = (
                t.slice(gh, 1, 0, h_dim)?,
                t.slice(gh, 1, h_dim, 2 * h_dim)?,
                t.slice(gh, 1, 2 * h_dim, 3 * h_dim)?,
            );
            let r = t.add(xr, hr)?;
            let r = t.sigmoid(r)?;
            let z = t.add(xz, hz)?;
            let z = t.sigmoid(z)?;
            let rn = t.mul(r, hn)?;
            let cand = t.add(xn, rn)?;
            let cand = t.tanh(cand)?;
            // h' = h + (1 - z) * (cand - h)
            let diff = t.sub(cand, h)?;
            let keep = t.neg(z)?;
            let keep = t.add_scalar(keep, T::one())?;
            let upd = t.mul(keep, diff)?;
            // masked rows add an exact zero, so padded steps leave h untouched
            let mask = t.constant(Tensor::new(vec![n, 1], active)?);
            let upd = t.mul(upd, mask)?;
            h = t.add(h, upd)?;
        }
        Ok(h)
    }

    pub fn encode(&self, store: &ParamStore, batch: &[Vec<usize>]) -> Result<Tensor> {
        super::eval_with(store, |t| self.forward(t, batch))
    }
}
