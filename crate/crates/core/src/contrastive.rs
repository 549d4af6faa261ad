//! Contrastive pretraining with paired augmented views and NT-Xent.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use rand::Rng;

use crate::augment::{augment_batch_seeded, AugmentConfig};
use crate::error::{shape_err, Error, Result};
use crate::nn::{AdamState, EncoderConfig, ImageEncoder, ProjectionHead};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{epoch_batches, mean};

/// Augmented views; rows `2i` and `2i + 1` come from source `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub images: Tensor,
    pub seeds: Vec<u64>,
}

impl ViewBatch {
    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn source(&self, view: usize) -> usize {
        view / 2
    }

    pub fn pairs(&self) -> Vec<usize> {
        interleaved_pairs(self.len() / 2)
    }
}

/// Pair map for `n` sources laid out as `0,0,1,1,...`.
pub fn interleaved_pairs(n: usize) -> Vec<usize> {
    (0..2 * n).map(|i| i ^ 1).collect()
}

/// Two views per source using the given per-view seeds.
pub fn make_views_seeded(images: &Tensor, cfg: &AugmentConfig, seeds: &[u64]) -> Result<ViewBatch> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n < 2 {
        return Err(Error::Config(format!(
            "contrastive batches need at least 2 sources for negatives, got {n}"
        )));
    }
    if seeds.len() != 2 * n {
        return Err(shape_err("make_views", &[2 * n], &[seeds.len()]));
    }
    let doubled: Vec<usize> = (0..2 * n).map(|i| i / 2).collect();
    let images = augment_batch_seeded(&images.gather_rows(&doubled)?, cfg, seeds)?;
    Ok(ViewBatch {
        images,
        seeds: seeds.to_vec(),
    })
}

pub fn make_views<R: Rng + ?Sized>(images: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Result<ViewBatch> {
    let n = images.shape().first().copied().unwrap_or(0);
    let seeds: Vec<u64> = (0..2 * n).map(|_| rng.random()).collect();
    make_views_seeded(images, cfg, &seeds)
}

/// `u.v / (tau |u| |v|)`.
pub fn cosine_score(u: &[f32], v: &[f32], tau: f32) -> Result<f32> {
    if u.len() != v.len() {
        return Err(shape_err("cosine_score", &[u.len()], &[v.len()]));
    }
    if !(tau > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum();
    let nu: f64 = u.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Invalid("cosine score of a zero vector".into()));
    }
    Ok((dot / (nu * nv * tau as f64)) as f32)
}

/// Checks that `pairs` is an involution without fixed points.
pub fn check_pairs(pairs: &[usize]) -> Result<()> {
    for (i, &p) in pairs.iter().enumerate() {
        if p >= pairs.len() || p == i || pairs[p] != i {
            return Err(Error::Invalid(format!("pair map is not an involution at view {i}")));
        }
    }
    Ok(())
}

/// Pairwise temperature-scaled cosine scores `[2N, 2N]`.
pub fn score_matrix<T: Scalar>(t: &mut Tape<T>, z: Var, tau: f64) -> Result<Var> {
    let zn = t.l2_normalize(z, 1)?;
    let zt = t.transpose(zn)?;
    let s = t.matmul(zn, zt)?;
    t.scale(s, T::c(1.0 / tau))
}

/// Mean over views of `-log(exp(s(a, pos a)) / sum_{k != a} exp(s(a, k)))`.
pub fn nt_xent_loss<T: Scalar>(t: &mut Tape<T>, z: Var, pairs: &[usize], tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let shape = t.shape(z).to_vec();
    if shape.len() != 2 || shape[0] != pairs.len() {
        return Err(shape_err("nt_xent_loss", &shape, &[pairs.len()]));
    }
    check_pairs(pairs)?;
    let m = pairs.len();
    let s = score_matrix(t, z, tau)?;
    let mut mask = vec![T::zero(); m * m];
    let mut pick = vec![T::zero(); m * m];
    for a in 0..m {
        // exp underflows to exactly zero, removing the anchor from the sum.
        mask[a * m + a] = T::c(-1e9);
        pick[a * m + pairs[a]] = T::one();
    }
    let mask = t.constant(Tensor::new(vec![m, m], mask)?);
    let pick = t.constant(Tensor::new(vec![m, m], pick)?);
    let masked = t.add(s, mask)?;
    let lse = t.logsumexp(masked, 1)?;
    let pos = t.mul(s, pick)?;
    let pos = t.sum_axis(pos, 1)?;
    let terms = t.sub(lse, pos)?;
    t.mean(terms)
}

/// Mean positive and negative entries of a score matrix.
pub fn pair_score_means(scores: &Tensor, pairs: &[usize]) -> (f32, f32) {
    let m = pairs.len();
    let (mut pos, mut neg) = (Vec::with_capacity(m), Vec::with_capacity(m * m));
    for a in 0..m {
        for k in 0..m {
            let v = scores.data()[a * m + k];
            if k == pairs[a] {
                pos.push(v);
            } else if k != a {
                neg.push(v);
            }
        }
    }
    (mean(&pos), mean(&neg))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f32,
    pub projection_hidden: usize,
    pub projection_dim: usize,
    pub augment: AugmentConfig,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            batch_size: 128,
            epochs: 20,
            lr: 1e-3,
            projection_hidden: 128,
            projection_dim: 64,
            augment: AugmentConfig::default(),
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("cl.temperature must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("cl.batch_size must be at least 2".into()));
        }
        if !(self.lr > 0.0) || self.projection_dim == 0 || self.projection_hidden == 0 {
            return Err(Error::Config("cl.lr and projection sizes must be positive".into()));
        }
        self.augment.validate()
    }
}

/// Encoder plus the projection head used only during pretraining.
#[derive(Clone, Debug)]
pub struct ClModel {
    pub encoder: ImageEncoder,
    pub projection: ProjectionHead,
}

impl ClModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        enc: &EncoderConfig,
        cfg: &ContrastiveConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = ImageEncoder::new(store, "enc", enc, rng)?;
        let projection = ProjectionHead::new(
            store,
            "proj",
            enc.embed_dim,
            cfg.projection_hidden,
            cfg.projection_dim,
            rng,
        );
        Ok(Self { encoder, projection })
    }

    pub fn project(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let h = self.encoder.forward(t, x)?;
        self.projection.forward(t, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClStepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f32,
    pub mean_pos_score: f32,
    pub mean_neg_score: f32,
}

/// SimCLR-style training of encoder and projection head.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_cl<R: Rng + ?Sized>(
    model: &ClModel,
    store: &mut ParamStore,
    adam: &mut AdamState,
    images: &Tensor,
    cfg: &ContrastiveConfig,
    rng: &mut R,
    mut on_step: impl FnMut(&ClStepRecord, &ParamStore),
) -> Result<Vec<ClStepRecord>> {
    cfg.validate()?;
    let n = images.shape().first().copied().unwrap_or(0);
    if cfg.epochs > 0 && n < 2 {
        return Err(Error::Config("contrastive pretraining needs at least 2 images".into()));
    }
    let batch = cfg.batch_size.min(n);
    let tau = cfg.temperature as f64;
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for idx in epoch_batches(n, batch, true, rng) {
            let views = make_views(&images.gather_rows(&idx)?, &cfg.augment, rng)?;
            let pairs = views.pairs();
            let mut t = Tape::new();
            t.bind(store, true);
            let x = t.constant(views.images);
            let z = model.project(&mut t, x)?;
            let loss = nt_xent_loss(&mut t, z, &pairs, tau)?;
            t.check_finite(loss, "contrastive loss")?;
            let mut g = t.backward(loss)?;
            adam.step(store, &g.param_grads(store), cfg.lr)?;
            let scores = {
                let mut st = Tape::new();
                let zc = st.constant(t.value(z).clone());
                let s = score_matrix(&mut st, zc, tau)?;
                st.value(s).clone()
            };
            let (p, q) = pair_score_means(&scores, &pairs);
            step += 1;
            let rec = ClStepRecord {
                step,
                epoch,
                loss: t.value(loss).data()[0],
                mean_pos_score: p,
                mean_neg_score: q,
            };
            on_step(&rec, store);
            history.push(rec);
        }
    }
    Ok(history)
}

/// Mean cosine similarity of positive and negative view pairs in encoder
/// feature space.
pub fn alignment_probe<R: Rng + ?Sized>(
    encoder: &ImageEncoder,
    store: &ParamStore,
    images: &Tensor,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(f32, f32)> {
    let views = make_views(images, cfg, rng)?;
    let pairs = views.pairs();
    let h = encoder.encode(store, &views.images)?;
    let mut t = Tape::new();
    let hv = t.constant(h);
    let s = score_matrix(&mut t, hv, 1.0)?;
    Ok(pair_score_means(t.value(s), &pairs))
}
