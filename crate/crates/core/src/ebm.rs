//! Energy-based pretraining with Langevin sampling from a replay buffer.
//!
//! Densities follow `p(x) ∝ exp(E(x))`: data should receive high energy and
//! the sampler climbs the energy surface.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::{augment_samples, AugmentConfig};
use crate::error::{shape_err, Error, Result};
use crate::kv::KvMap;
use crate::nn::{AdamState, EncoderConfig, EnergyHead, HeadInit, ImageEncoder};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{epoch_batches, in_chunks, mean};

#[derive(Clone, Debug, PartialEq)]
pub struct LangevinConfig {
    pub steps: usize,
    pub step_size: f32,
    /// Standard deviation of the injected noise; `None` means `sqrt(step_size)`.
    pub noise_scale: Option<f32>,
    pub clamp: Option<(f32, f32)>,
    /// Block parameter gradients through every sampling step.
    pub detach: bool,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        Self {
            steps: 40,
            step_size: 0.1,
            noise_scale: None,
            clamp: Some((-1.0, 1.0)),
            detach: true,
        }
    }
}

impl LangevinConfig {
    pub fn noise_std(&self) -> f32 {
        self.noise_scale.unwrap_or_else(|| libm::sqrtf(self.step_size))
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("langevin.steps must be at least 1".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Config("langevin.step_size must be positive".into()));
        }
        if !(self.noise_std() >= 0.0) {
            return Err(Error::Config("langevin.noise must be non-negative".into()));
        }
        if !self.detach {
            return Err(Error::Config(
                "differentiating through sampling steps needs second-order gradients, which the engine does not provide; keep langevin.detach=true".into(),
            ));
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvMap, prefix: &str) {
        kv.set(format!("{prefix}.steps"), self.steps);
        kv.set(format!("{prefix}.step_size"), self.step_size);
        kv.set(format!("{prefix}.noise"), self.noise_std());
        kv.set(format!("{prefix}.detach"), self.detach);
    }
}

/// `x' = clamp(x + step_size / 2 * grad + noise)`.
pub fn langevin_step(
    x: &Tensor,
    grad: &Tensor,
    step_size: f32,
    noise: &Tensor,
    clamp: Option<(f32, f32)>,
) -> Result<Tensor> {
    if x.shape() != grad.shape() || x.shape() != noise.shape() {
        return Err(shape_err("langevin_step", x.shape(), grad.shape()));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("energy gradient during sampling".into()));
    }
    let half = step_size * 0.5;
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .zip(noise.data())
        .map(|((&v, &g), &n)| {
            let y = v + half * g + n;
            match clamp {
                Some((lo, hi)) => y.clamp(lo, hi),
                None => y,
            }
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Runs `cfg.steps` Langevin updates from `init`. `grad_fn` returns the
/// gradient of the summed energy with respect to its input.
pub fn sample_chain<R, F>(init: Tensor, mut grad_fn: F, cfg: &LangevinConfig, rng: &mut R) -> Result<Tensor>
where
    R: Rng + ?Sized,
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    cfg.validate()?;
    let sigma = cfg.noise_std();
    let normal = Normal::new(0.0f32, sigma).map_err(|e| Error::Config(format!("{e}")))?;
    let mut x = init;
    for _ in 0..cfg.steps {
        let g = grad_fn(&x)?;
        let noise = Tensor::from_fn(x.shape(), |_| if sigma > 0.0 { normal.sample(rng) } else { 0.0 });
        x = langevin_step(&x, &g, cfg.step_size, &noise, cfg.clamp)?;
    }
    Ok(x)
}

/// Evaluates `f` on a tape holding `store` as constants and returns the
/// per-example outputs and the input gradient of their sum.
pub fn input_gradient<F>(store: &ParamStore, x: &Tensor, f: F) -> Result<(Tensor, Tensor)>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut t = Tape::new();
    t.bind(store, false);
    let xv = t.leaf(x.clone());
    let e = f(&mut t, xv)?;
    let s = t.sum(e)?;
    let mut g = t.backward(s)?;
    let grad = g.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((t.value(e).clone(), grad))
}

/// Fixed-capacity FIFO store of past samples.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    pub capacity: usize,
    pub reinit_prob: f64,
    pub range: (f32, f32),
    items: VecDeque<Vec<f32>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, reinit_prob: f64) -> Self {
        Self {
            capacity,
            reinit_prob,
            range: (-1.0, 1.0),
            items: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Stored sample at `i`, oldest first.
    pub fn get(&self, i: usize) -> Option<&[f32]> {
        self.items.get(i).map(Vec::as_slice)
    }

    /// Appends every row of `batch`, evicting the oldest entries when full.
    pub fn push(&mut self, batch: &Tensor) {
        let n = batch.shape().first().copied().unwrap_or(0);
        if n == 0 || self.capacity == 0 {
            return;
        }
        let per = batch.numel() / n;
        for row in batch.data().chunks_exact(per) {
            if self.items.len() == self.capacity {
                self.items.pop_front();
            }
            let (lo, hi) = self.range;
            self.items.push_back(row.iter().map(|v| v.clamp(lo, hi)).collect());
        }
    }

    /// Draws `n` chain initializations of shape `sample_shape`; returns the
    /// batch and how many slots received fresh noise.
    pub fn draw<R: Rng + ?Sized>(&self, n: usize, sample_shape: &[usize], rng: &mut R) -> Result<(Tensor, usize)> {
        let per: usize = sample_shape.iter().product();
        let mut data = Vec::with_capacity(n * per);
        let mut fresh = 0;
        let (lo, hi) = self.range;
        for _ in 0..n {
            let noise = self.items.is_empty() || rng.random_bool(self.reinit_prob.clamp(0.0, 1.0));
            if noise {
                fresh += 1;
                data.extend((0..per).map(|_| rng.random_range(lo..=hi)));
            } else {
                let item = &self.items[rng.random_range(0..self.items.len())];
                if item.len() != per {
                    return Err(shape_err("buffer_draw", sample_shape, &[item.len()]));
                }
                data.extend_from_slice(item);
            }
        }
        let mut shape = alloc::vec![n];
        shape.extend_from_slice(sample_shape);
        Ok((Tensor::new(shape, data)?, fresh))
    }
}

/// `mean(E_fake) - mean(E_real) + alpha * (mean(E_real^2) + mean(E_fake^2))`.
pub fn ebm_loss<T: Scalar>(t: &mut Tape<T>, e_real: Var, e_fake: Var, alpha: f64) -> Result<Var> {
    if t.shape(e_real) != t.shape(e_fake) {
        return Err(shape_err("ebm_loss", t.shape(e_real), t.shape(e_fake)));
    }
    let mr = t.mean(e_real)?;
    let mf = t.mean(e_fake)?;
    let cd = t.sub(mf, mr)?;
    if alpha == 0.0 {
        return Ok(cd);
    }
    let r2 = t.square(e_real)?;
    let r2 = t.mean(r2)?;
    let f2 = t.square(e_fake)?;
    let f2 = t.mean(f2)?;
    let reg = t.add(r2, f2)?;
    let reg = t.scale(reg, T::c(alpha))?;
    t.add(cd, reg)
}

/// Image encoder followed by a scalar energy head.
#[derive(Clone, Debug)]
pub struct EbmModel {
    pub encoder: ImageEncoder,
    pub head: EnergyHead,
}

impl EbmModel {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let encoder = ImageEncoder::new(store, "enc", cfg, rng)?;
        let head = EnergyHead::new(store, "energy", cfg.embed_dim, HeadInit::Kaiming, rng);
        Ok(Self { encoder, head })
    }

    pub fn energy(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let e = self.encoder.forward(t, x)?;
        self.head.forward(t, e)
    }

    /// Energies of many images, evaluated in chunks.
    pub fn energies(&self, store: &ParamStore, images: &Tensor) -> Result<Vec<f32>> {
        in_chunks(images, 64, |chunk| {
            crate::nn::eval_with(store, |t| {
                let x = t.constant(chunk.clone());
                self.energy(t, x)
            })
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EbmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub alpha: f32,
    pub langevin: LangevinConfig,
    pub buffer_capacity: usize,
    pub reinit_prob: f64,
    pub augment: AugmentConfig,
}

impl Default for EbmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 32,
            lr: 1e-4,
            alpha: 0.1,
            langevin: LangevinConfig::default(),
            buffer_capacity: 10000,
            reinit_prob: 0.05,
            augment: AugmentConfig::default(),
        }
    }
}

impl EbmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.langevin.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::Config("ebm batch size, lr and alpha must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.reinit_prob) {
            return Err(Error::Config("buffer.reinit must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EbmStepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f32,
    pub mean_e_real: f32,
    pub mean_e_fake: f32,
    pub buffer_size: usize,
}

/// Contrastive-divergence training. On a numerical failure the error is
/// returned and `store` still holds the parameters of the last good step.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_ebm<R: Rng + ?Sized>(
    model: &EbmModel,
    store: &mut ParamStore,
    adam: &mut AdamState,
    buffer: &mut ReplayBuffer,
    images: &Tensor,
    cfg: &EbmTrainConfig,
    rng: &mut R,
    mut on_step: impl FnMut(&EbmStepRecord, &ParamStore),
) -> Result<Vec<EbmStepRecord>> {
    cfg.validate()?;
    let n = images.shape().first().copied().unwrap_or(0);
    if cfg.epochs > 0 && n == 0 {
        return Err(Error::Invalid("pretraining set is empty".into()));
    }
    let sample_shape = images.shape()[1..].to_vec();
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(n, cfg.batch_size, true, rng) {
            let real = images.gather_rows(&batch)?;
            let (init, _) = buffer.draw(batch.len(), &sample_shape, rng)?;
            let init = augment_samples(&init, &cfg.augment, rng)?;
            let snapshot: &ParamStore = store;
            let fake = sample_chain(
                init,
                |x| Ok(input_gradient(snapshot, x, |t, xv| model.energy(t, xv))?.1),
                &cfg.langevin,
                rng,
            )?;
            let mut t = Tape::new();
            t.bind(store, true);
            let b = batch.len();
            let x = t.constant(Tensor::concat_rows(&[&real, &fake])?);
            let e = model.energy(&mut t, x)?;
            let e_real = t.slice(e, 0, 0, b)?;
            let e_fake = t.slice(e, 0, b, 2 * b)?;
            let loss = ebm_loss(&mut t, e_real, e_fake, cfg.alpha as f64)?;
            t.check_finite(loss, "ebm loss")?;
            let mut g = t.backward(loss)?;
            adam.step(store, &g.param_grads(store), cfg.lr)?;
            buffer.push(&fake);
            step += 1;
            let rec = EbmStepRecord {
                step,
                epoch,
                loss: t.value(loss).data()[0],
                mean_e_real: mean(t.value(e_real).data()),
                mean_e_fake: mean(t.value(e_fake).data()),
                buffer_size: buffer.len(),
            };
            on_step(&rec, store);
            history.push(rec);
        }
    }
    Ok(history)
}
