//! Supervised energy-based VQA: JEM with optional divergence stopping,
//! class-conditional CEBM, and the Fréchet feature distance.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use rand::Rng;

use crate::augment::{augment_samples, AugmentConfig};
use crate::ebm::{ebm_loss, input_gradient, sample_chain, LangevinConfig, ReplayBuffer};
use crate::error::{shape_err, Error, Result};
use crate::nn::{AdamState, EncoderConfig, EnergyHead, HeadInit, ImageEncoder, QuestionEncoder, QuestionEncoderConfig};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{epoch_batches, mean};
use crate::vqa::{accuracy, cross_entropy, fuse, one_hot, EarlyStopper, QaSet, VqaModel, ANSWERS};

/// `E(x) = -logsumexp_y f(x)[y]`.
pub fn jem_energy<T: Scalar>(t: &mut Tape<T>, logits: Var) -> Result<Var> {
    let l = t.logsumexp(logits, 1)?;
    t.neg(l)
}

pub struct JemLossTerms {
    pub total: Var,
    pub classification: Var,
    pub energy: Var,
}

/// `w * CE(real) + ebm_loss(-E(real), -E(fake))`. The energy term acts on the
/// log-density score `logsumexp(logits) = -E`, so data density is raised.
pub fn jem_loss<T: Scalar>(
    t: &mut Tape<T>,
    logits_real: Var,
    logits_fake: Var,
    targets: &Tensor<T>,
    w: f64,
    alpha: f64,
) -> Result<JemLossTerms> {
    let classification = cross_entropy(t, logits_real, targets)?;
    let sr = t.logsumexp(logits_real, 1)?;
    let sf = t.logsumexp(logits_fake, 1)?;
    let energy = ebm_loss(t, sr, sf, alpha)?;
    let weighted = t.scale(classification, T::c(w))?;
    let total = t.add(weighted, energy)?;
    Ok(JemLossTerms {
        total,
        classification,
        energy,
    })
}

/// True when the real and sampled mean energies differ by more than `delta`.
pub fn jem_stop_check(mean_e_real: f64, mean_e_fake: f64, delta: f64) -> bool {
    (mean_e_fake - mean_e_real).abs() > delta
}

/// Mean over the most recent `window` observations.
#[derive(Clone, Debug)]
pub struct RunningMean {
    window: usize,
    values: VecDeque<f64>,
}

impl RunningMean {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            values: VecDeque::new(),
        }
    }

    pub fn push(&mut self, v: f64) -> f64 {
        if self.values.len() == self.window {
            self.values.pop_front();
        }
        self.values.push_back(v);
        self.mean()
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values.iter().sum::<f64>() / self.values.len() as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JemConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Weight of the classification term.
    pub w: f32,
    pub delta: f32,
    /// Halt once running mean energies of real and sampled inputs diverge.
    pub divergence_stop: bool,
    pub window: usize,
    pub alpha: f32,
    pub patience: usize,
    pub langevin: LangevinConfig,
    pub buffer_capacity: usize,
    pub reinit_prob: f64,
    pub augment: AugmentConfig,
}

impl Default for JemConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            w: 1.0,
            delta: 0.8,
            divergence_stop: false,
            window: 20,
            alpha: 0.1,
            patience: 5,
            langevin: LangevinConfig::default(),
            buffer_capacity: 10000,
            reinit_prob: 0.05,
            augment: AugmentConfig::identity(),
        }
    }
}

impl JemConfig {
    pub fn standard() -> Self {
        Self::default()
    }

    /// Down-weighted classification term plus divergence stopping.
    pub fn modified() -> Self {
        Self {
            w: 0.1,
            divergence_stop: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0) || !(self.delta > 0.0) {
            return Err(Error::Config("jem.w and jem.delta must be positive".into()));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.alpha >= 0.0) || self.patience == 0 {
            return Err(Error::Config("jem batch size, lr, alpha and patience must be positive".into()));
        }
        self.langevin.validate()?;
        self.augment.validate()
    }
}

/// Per-epoch training summary shared by JEM and CEBM.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyEpochRecord {
    pub epoch: usize,
    pub ce_loss: Option<f32>,
    pub energy_loss: f32,
    pub mean_e_real: f32,
    pub mean_e_fake: f32,
    pub stop_flag: bool,
    pub frechet: Option<f64>,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JemOutcome {
    pub history: Vec<EnergyEpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Global step at which divergence stopping fired.
    pub stopped_at: Option<usize>,
}

struct EpochSums {
    ce: Vec<f32>,
    energy: Vec<f32>,
    real: Vec<f32>,
    fake: Vec<f32>,
}

impl EpochSums {
    fn new() -> Self {
        Self {
            ce: Vec::new(),
            energy: Vec::new(),
            real: Vec::new(),
            fake: Vec::new(),
        }
    }
}

/// JEM training of a VQA model. Sampling runs in image space while each
/// chain keeps the question of its paired example. On success `store` holds
/// the parameters of the best validation epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_jem<R: Rng + ?Sized>(
    model: &VqaModel,
    store: &mut ParamStore,
    adam: &mut AdamState,
    train: &QaSet,
    val: &QaSet,
    cfg: &JemConfig,
    rng: &mut R,
    mut on_epoch: impl FnMut(&EnergyEpochRecord, &ParamStore),
) -> Result<JemOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid("jem needs non-empty training and validation splits".into()));
    }
    let sample_shape = train.images.shape()[1..].to_vec();
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, cfg.reinit_prob);
    let mut run_real = RunningMean::new(cfg.window);
    let mut run_fake = RunningMean::new(cfg.window);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = store.clone();
    let mut history = Vec::new();
    let mut stopped_at = None;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut sums = EpochSums::new();
        let mut diverged = false;
        for idx in epoch_batches(train.len(), cfg.batch_size, false, rng) {
            let b = idx.len();
            let questions: Vec<Vec<usize>> = idx.iter().map(|&i| train.questions[i].clone()).collect();
            let answers: Vec<usize> = idx.iter().map(|&i| train.answers[i]).collect();
            let real = train.images.gather_rows(&idx)?;
            let (init, _) = buffer.draw(b, &sample_shape, rng)?;
            let init = augment_samples(&init, &cfg.augment, rng)?;
            let snapshot: &ParamStore = store;
            let fake = sample_chain(
                init,
                |x| {
                    let (_, g) = input_gradient(snapshot, x, |t, xv| {
                        let y = model.logits(t, xv, &questions)?;
                        t.logsumexp(y, 1)
                    })?;
                    Ok(g)
                },
                &cfg.langevin,
                rng,
            )?;
            let mut t = Tape::new();
            t.bind(store, true);
            let x = t.constant(Tensor::concat_rows(&[&real, &fake])?);
            let both_q: Vec<Vec<usize>> = questions.iter().chain(&questions).cloned().collect();
            let logits = model.logits(&mut t, x, &both_q)?;
            let lr_ = t.slice(logits, 0, 0, b)?;
            let lf = t.slice(logits, 0, b, 2 * b)?;
            let terms = jem_loss(&mut t, lr_, lf, &one_hot(&answers, ANSWERS)?, cfg.w as f64, cfg.alpha as f64)?;
            t.check_finite(terms.total, "jem loss")?;
            let mut g = t.backward(terms.total)?;
            adam.step(store, &g.param_grads(store), cfg.lr)?;
            buffer.push(&fake);
            step += 1;
            let er = jem_energy(&mut t, lr_)?;
            let ef = jem_energy(&mut t, lf)?;
            let (mr, mf) = (mean(t.value(er).data()), mean(t.value(ef).data()));
            sums.ce.push(t.value(terms.classification).data()[0]);
            sums.energy.push(t.value(terms.energy).data()[0]);
            sums.real.push(mr);
            sums.fake.push(mf);
            let ar = run_real.push(mr as f64);
            let af = run_fake.push(mf as f64);
            if cfg.divergence_stop && jem_stop_check(ar, af, cfg.delta as f64) {
                diverged = true;
                stopped_at = Some(step);
                break;
            }
        }
        let val_logits = model.answer_scores(store, &val.images, &val.questions)?;
        let rec = EnergyEpochRecord {
            epoch,
            ce_loss: Some(mean(&sums.ce)),
            energy_loss: mean(&sums.energy),
            mean_e_real: mean(&sums.real),
            mean_e_fake: mean(&sums.fake),
            stop_flag: diverged,
            frechet: None,
            val_accuracy: accuracy(&val_logits, &val.answers),
        };
        on_epoch(&rec, store);
        let d = stopper.observe(epoch, rec.val_accuracy);
        history.push(rec);
        if d.improved {
            best = store.clone();
        }
        if diverged || d.stop {
            break;
        }
    }
    if !history.is_empty() {
        *store = best;
    }
    Ok(JemOutcome {
        history,
        best_epoch: stopper.best_epoch,
        best_val_accuracy: stopper.best.unwrap_or(0.0),
        stopped_at,
    })
}

/// Argmin over class energies; ties go to the lowest index.
pub fn cebm_classify(energies: &[f32]) -> usize {
    let mut best = 0;
    for (i, &e) in energies.iter().enumerate() {
        if e < energies[best] {
            best = i;
        }
    }
    best
}

/// Shared encoders with one affine energy head per answer on the fused
/// representation. Lower energy means a better match.
#[derive(Clone, Debug)]
pub struct CebmModel {
    pub encoder: ImageEncoder,
    pub question: QuestionEncoder,
    pub heads: Vec<EnergyHead>,
}

impl CebmModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        enc: &EncoderConfig,
        q: &QuestionEncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = ImageEncoder::new(store, "enc", enc, rng)?;
        let question = QuestionEncoder::new(store, "q", q, rng)?;
        let fused = enc.embed_dim + q.hidden_dim;
        let heads = (0..ANSWERS)
            .map(|y| EnergyHead::new(store, &format!("cebm.head{y}"), fused, HeadInit::Kaiming, rng))
            .collect();
        Ok(Self {
            encoder,
            question,
            heads,
        })
    }

    /// Class energies `[N, A]`.
    pub fn energies<T: Scalar>(&self, t: &mut Tape<T>, x: Var, questions: &[Vec<usize>]) -> Result<Var> {
        let v = self.encoder.forward(t, x)?;
        let q = self.question.forward(t, questions)?;
        let p = fuse(t, v, q)?;
        let n = t.shape(p)[0];
        let mut cols = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let e = h.forward(t, p)?;
            cols.push(t.reshape(e, &[n, 1])?);
        }
        t.concat(&cols, 1)
    }

    /// `E(x_i | y_i)` for each example.
    pub fn conditional<T: Scalar>(&self, t: &mut Tape<T>, x: Var, questions: &[Vec<usize>], labels: &[usize]) -> Result<Var> {
        let e = self.energies(t, x, questions)?;
        let pick = t.constant(one_hot(labels, self.heads.len())?);
        let picked = t.mul(e, pick)?;
        t.sum_axis(picked, 1)
    }

    pub fn energy_table(&self, store: &ParamStore, images: &Tensor, questions: &[Vec<usize>]) -> Result<Tensor> {
        let n = images.shape()[0];
        if questions.len() != n {
            return Err(shape_err("cebm", &[n], &[questions.len()]));
        }
        let mut out = Vec::with_capacity(n * ANSWERS);
        let mut start = 0;
        while start < n {
            let end = (start + 64).min(n);
            let chunk = images.select_rows(start, end)?;
            let e = crate::nn::eval_with(store, |t| {
                let x = t.constant(chunk);
                self.energies(t, x, &questions[start..end])
            })?;
            out.extend_from_slice(e.data());
            start = end;
        }
        Tensor::new(vec![n, ANSWERS], out)
    }

    pub fn classify(&self, store: &ParamStore, images: &Tensor, questions: &[Vec<usize>]) -> Result<Vec<usize>> {
        let e = self.energy_table(store, images, questions)?;
        Ok(e.data().chunks(ANSWERS).map(cebm_classify).collect())
    }
}

/// Gaussian fit of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FrechetStats {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl FrechetStats {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>, count: usize) -> Result<Self> {
        if cov.len() != mean.len() * mean.len() {
            return Err(shape_err("frechet", &[mean.len(), mean.len()], &[cov.len()]));
        }
        Ok(Self { mean, cov, count })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sample mean and unbiased covariance of `[N, d]` features.
    pub fn from_features(features: &Tensor) -> Result<Self> {
        if features.rank() != 2 || features.shape()[0] < 2 {
            return Err(Error::Invalid("feature statistics need at least 2 rows of a 2-d tensor".into()));
        }
        let (n, d) = (features.shape()[0], features.shape()[1]);
        let x = features.data();
        let mut mean = vec![0.0f64; d];
        for row in x.chunks(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0f64; d * d];
        for row in x.chunks(d) {
            for i in 0..d {
                let a = row[i] as f64 - mean[i];
                for j in i..d {
                    cov[i * d + j] += a * (row[j] as f64 - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1) as f64;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Self::new(mean, cov, n)
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and row-major eigenvectors (column `k` pairs with
/// eigenvalue `k`).
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i * n + i]).collect(), v)
}

fn sqrt_psd(a: &[f64], n: usize) -> Vec<f64> {
    let (vals, vecs) = symmetric_eigen(a, n);
    let mut out = vec![0.0f64; n * n];
    for (k, &l) in vals.iter().enumerate() {
        let s = l.max(0.0).sqrt();
        for i in 0..n {
            let vi = vecs[i * n + k] * s;
            for j in 0..n {
                out[i * n + j] += vi * vecs[j * n + k];
            }
        }
    }
    out
}

fn matmul_sq(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Ridge added to both covariances when either is singular.
pub const FRECHET_RIDGE: f64 = 1e-6;

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
pub fn frechet_distance(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    let n = a.dim();
    if b.dim() != n {
        return Err(shape_err("frechet_distance", &[n], &[b.dim()]));
    }
    let mut sa = a.cov.clone();
    let mut sb = b.cov.clone();
    let mut singular = false;
    for s in [&sa, &sb] {
        for i in 0..n {
            for j in 0..i {
                if (s[i * n + j] - s[j * n + i]).abs() > 1e-9 * (1.0 + s[i * n + j].abs()) {
                    return Err(Error::Invalid("covariance is not symmetric".into()));
                }
            }
        }
        let (vals, _) = symmetric_eigen(s, n);
        let top = vals.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1.0);
        let low = vals.iter().copied().fold(f64::INFINITY, f64::min);
        if low < -FRECHET_RIDGE * top {
            return Err(Error::Invalid(format!("covariance not positive semi-definite (eigenvalue {low})")));
        }
        singular |= low <= 1e-12 * top;
    }
    if singular {
        log::warn!("singular covariance in frechet_distance; adding ridge {FRECHET_RIDGE}");
        for i in 0..n {
            sa[i * n + i] += FRECHET_RIDGE;
            sb[i * n + i] += FRECHET_RIDGE;
        }
    }
    let mu: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    // tr((S_a S_b)^(1/2)) = tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)), a symmetric form.
    let ra = sqrt_psd(&sa, n);
    let inner = matmul_sq(&matmul_sq(&ra, &sb, n), &ra, n);
    let mut sym = inner.clone();
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = 0.5 * (inner[i * n + j] + inner[j * n + i]);
        }
    }
    let (vals, _) = symmetric_eigen(&sym, n);
    let cross: f64 = vals.iter().map(|l| l.max(0.0).sqrt()).sum();
    let tr: f64 = (0..n).map(|i| sa[i * n + i] + sb[i * n + i]).sum();
    Ok((mu + tr - 2.0 * cross).max(0.0))
}

/// Halts when the distance changed by less than `tolerance` (relative) over
/// the last `window` checkpoints.
#[derive(Clone, Debug)]
pub struct FrechetStopper {
    pub window: usize,
    pub tolerance: f64,
    pub history: Vec<f64>,
}

impl Default for FrechetStopper {
    fn default() -> Self {
        Self {
            window: 3,
            tolerance: 0.05,
            history: Vec::new(),
        }
    }
}

impl FrechetStopper {
    pub fn observe(&mut self, distance: f64) -> bool {
        self.history.push(distance);
        let n = self.history.len();
        if n <= self.window {
            return false;
        }
        let old = self.history[n - 1 - self.window];
        (distance - old).abs() / old.abs().max(1e-12) < self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CebmConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub alpha: f32,
    pub langevin: LangevinConfig,
    pub buffer_capacity: usize,
    pub reinit_prob: f64,
    /// Fréchet distance is evaluated every this many epochs.
    pub frechet_every: usize,
    /// Generated and real samples used for each Fréchet evaluation.
    pub frechet_samples: usize,
}

impl Default for CebmConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 1e-4,
            alpha: 0.1,
            langevin: LangevinConfig::default(),
            buffer_capacity: 3000,
            reinit_prob: 0.05,
            frechet_every: 1,
            frechet_samples: 256,
        }
    }
}

impl CebmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || self.frechet_every == 0 || self.frechet_samples < 2 {
            return Err(Error::Config("cebm batch size, lr, frechet cadence and sample count must be positive".into()));
        }
        self.langevin.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CebmOutcome {
    pub history: Vec<EnergyEpochRecord>,
    /// Epoch of the lowest Fréchet distance seen.
    pub best_epoch: usize,
    pub best_frechet: Option<f64>,
    pub halted: bool,
}

/// One class-conditioned replay buffer per answer.
pub fn class_buffers(cfg: &CebmConfig) -> Vec<ReplayBuffer> {
    (0..ANSWERS)
        .map(|_| ReplayBuffer::new(cfg.buffer_capacity, cfg.reinit_prob))
        .collect()
}

/// Draws chain starts from each label's buffer and samples `x ~ exp(-E(x|y))`
/// with the paired question fixed.
#[allow(clippy::too_many_arguments)]
pub fn cebm_sample<R: Rng + ?Sized>(
    model: &CebmModel,
    store: &ParamStore,
    buffers: &[ReplayBuffer],
    questions: &[Vec<usize>],
    labels: &[usize],
    sample_shape: &[usize],
    cfg: &LangevinConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let mut parts = Vec::with_capacity(labels.len());
    for &y in labels {
        let buf = buffers.get(y).ok_or(Error::Index { index: y, size: buffers.len() })?;
        parts.push(buf.draw(1, sample_shape, rng)?.0);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let init = Tensor::concat_rows(&refs)?;
    sample_chain(
        init,
        |x| {
            let (_, g) = input_gradient(store, x, |t, xv| {
                let e = model.conditional(t, xv, questions, labels)?;
                t.neg(e)
            })?;
            Ok(g)
        },
        cfg,
        rng,
    )
}

/// Conditional contrastive divergence with per-class chains. Every
/// `frechet_every` epochs the distance between generated and training
/// features under `features` is recorded; training halts once it plateaus.
#[allow(clippy::too_many_arguments)]
pub fn train_cebm<R, F>(
    model: &CebmModel,
    store: &mut ParamStore,
    adam: &mut AdamState,
    train: &QaSet,
    val: &QaSet,
    cfg: &CebmConfig,
    mut features: F,
    rng: &mut R,
    mut on_epoch: impl FnMut(&EnergyEpochRecord, &ParamStore),
) -> Result<CebmOutcome>
where
    R: Rng + ?Sized,
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid("cebm needs non-empty training and validation splits".into()));
    }
    let sample_shape = train.images.shape()[1..].to_vec();
    let mut buffers = class_buffers(cfg);
    let real_idx: Vec<usize> = (0..train.len().min(cfg.frechet_samples)).collect();
    let real_stats = FrechetStats::from_features(&features(&train.images.gather_rows(&real_idx)?)?)?;
    let mut stopper = FrechetStopper::default();
    let mut best: Option<(usize, f64)> = None;
    let mut history = Vec::new();
    let mut halted = false;
    for epoch in 1..=cfg.epochs {
        let mut sums = EpochSums::new();
        let mut recent: Vec<Tensor> = Vec::new();
        for idx in epoch_batches(train.len(), cfg.batch_size, false, rng) {
            let b = idx.len();
            let questions: Vec<Vec<usize>> = idx.iter().map(|&i| train.questions[i].clone()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train.answers[i]).collect();
            let real = train.images.gather_rows(&idx)?;
            let fake = cebm_sample(model, store, &buffers, &questions, &labels, &sample_shape, &cfg.langevin, rng)?;
            let mut t = Tape::new();
            t.bind(store, true);
            let x = t.constant(Tensor::concat_rows(&[&real, &fake])?);
            let both_q: Vec<Vec<usize>> = questions.iter().chain(&questions).cloned().collect();
            let both_y: Vec<usize> = labels.iter().chain(&labels).copied().collect();
            let e = model.conditional(&mut t, x, &both_q, &both_y)?;
            let er = t.slice(e, 0, 0, b)?;
            let ef = t.slice(e, 0, b, 2 * b)?;
            let sr = t.neg(er)?;
            let sf = t.neg(ef)?;
            let loss = ebm_loss(&mut t, sr, sf, cfg.alpha as f64)?;
            t.check_finite(loss, "cebm loss")?;
            let mut g = t.backward(loss)?;
            adam.step(store, &g.param_grads(store), cfg.lr)?;
            for (i, &y) in labels.iter().enumerate() {
                buffers[y].push(&fake.select_rows(i, i + 1)?);
            }
            sums.energy.push(t.value(loss).data()[0]);
            sums.real.push(mean(t.value(er).data()));
            sums.fake.push(mean(t.value(ef).data()));
            recent.push(fake);
        }
        let mut frechet = None;
        let mut stop = false;
        if epoch % cfg.frechet_every == 0 {
            let refs: Vec<&Tensor> = recent.iter().rev().collect();
            let gen = Tensor::concat_rows(&refs)?;
            let take = gen.shape()[0].min(cfg.frechet_samples);
            let gen = gen.select_rows(0, take)?;
            let d = frechet_distance(&FrechetStats::from_features(&features(&gen)?)?, &real_stats)?;
            frechet = Some(d);
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((epoch, d));
            }
            stop = stopper.observe(d);
        }
        let pred = model.classify(store, &val.images, &val.questions)?;
        let hits = pred.iter().zip(&val.answers).filter(|(p, y)| p == y).count();
        let rec = EnergyEpochRecord {
            epoch,
            ce_loss: None,
            energy_loss: mean(&sums.energy),
            mean_e_real: mean(&sums.real),
            mean_e_fake: mean(&sums.fake),
            stop_flag: stop,
            frechet,
            val_accuracy: hits as f64 / val.len() as f64,
        };
        on_epoch(&rec, store);
        history.push(rec);
        if stop {
            halted = true;
            break;
        }
    }
    Ok(CebmOutcome {
        history,
        best_epoch: best.map_or(0, |b| b.0),
        best_frechet: best.map(|b| b.1),
        halted,
    })
}
