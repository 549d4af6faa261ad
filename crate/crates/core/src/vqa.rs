//! VQA model assembly, supervised fine-tuning and evaluation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use rand::Rng;

use crate::data::{Image, Shape, Split};
use crate::error::{shape_err, Error, Result};
use crate::nn::{
    AdamState, ClassifierHead, EncoderConfig, HeadInit, ImageEncoder, QuestionEncoder,
    QuestionEncoderConfig,
};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::epoch_batches;

/// Number of answer classes: sphere, cube, cylinder.
pub const ANSWERS: usize = 3;

/// Rendered images with tokenized questions and answer indices.
#[derive(Clone, Debug, PartialEq)]
pub struct QaSet {
    /// `[N, 3, H, W]` in `[-1, 1]`.
    pub images: Tensor,
    pub questions: Vec<Vec<usize>>,
    pub answers: Vec<usize>,
    pub ids: Vec<usize>,
}

impl QaSet {
    /// Renders every example of a labelled split.
    pub fn from_split(split: &Split) -> Result<Self> {
        let mut rendered = Vec::with_capacity(split.examples.len());
        let mut questions = Vec::with_capacity(split.examples.len());
        let mut answers = Vec::with_capacity(split.examples.len());
        let mut ids = Vec::with_capacity(split.examples.len());
        for e in &split.examples {
            let qa = e
                .qa
                .as_ref()
                .ok_or_else(|| Error::Invalid(format!("{} split has no answers", split.kind)))?;
            rendered.push(e.render());
            questions.push(qa.tokens.clone());
            answers.push(qa.answer_index());
            ids.push(e.index);
        }
        let refs: Vec<&Image> = rendered.iter().collect();
        Ok(Self {
            images: Image::batch_tensor(&refs)?,
            questions,
            answers,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.gather_rows(idx)?,
            questions: idx.iter().map(|&i| self.questions[i].clone()).collect(),
            answers: idx.iter().map(|&i| self.answers[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
        })
    }
}

/// Concatenates image and question features along the feature axis.
pub fn fuse<T: Scalar>(t: &mut Tape<T>, v: Var, q: Var) -> Result<Var> {
    let (sv, sq) = (t.shape(v).to_vec(), t.shape(q).to_vec());
    if sv.len() != 2 || sq.len() != 2 || sv[0] != sq[0] {
        return Err(shape_err("fuse", &sv, &sq));
    }
    t.concat(&[v, q], 1)
}

/// Mean cross-entropy against one-hot targets `[N, A]`.
pub fn cross_entropy<T: Scalar>(t: &mut Tape<T>, logits: Var, one_hot: &Tensor<T>) -> Result<Var> {
    if t.shape(logits) != one_hot.shape() || one_hot.rank() != 2 {
        return Err(shape_err("cross_entropy", t.shape(logits), one_hot.shape()));
    }
    let a = one_hot.shape()[1];
    for (i, row) in one_hot.data().chunks(a.max(1)).enumerate() {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != a - 1 {
            return Err(Error::Invalid(format!("target row {i} is not one-hot")));
        }
    }
    let n = one_hot.shape()[0];
    let oh = t.constant(one_hot.clone());
    let lp = t.log_softmax(logits, 1)?;
    let picked = t.mul(lp, oh)?;
    let s = t.sum(picked)?;
    t.scale(s, -T::one() / T::c(n.max(1) as f64))
}

pub fn one_hot<T: Scalar>(answers: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); answers.len() * classes];
    for (i, &a) in answers.iter().enumerate() {
        if a >= classes {
            return Err(Error::Index { index: a, size: classes });
        }
        data[i * classes + a] = T::one();
    }
    Tensor::new(vec![answers.len(), classes], data)
}

/// Image encoder, question encoder and answer classifier.
#[derive(Clone, Debug)]
pub struct VqaModel {
    pub encoder: ImageEncoder,
    pub question: QuestionEncoder,
    pub classifier: ClassifierHead,
}

impl VqaModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        enc: &EncoderConfig,
        q: &QuestionEncoderConfig,
        hidden: usize,
        init: HeadInit,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = ImageEncoder::new(store, "enc", enc, rng)?;
        let question = QuestionEncoder::new(store, "q", q, rng)?;
        let classifier = ClassifierHead::new(
            store,
            "cls",
            enc.embed_dim + q.hidden_dim,
            hidden,
            ANSWERS,
            init,
            rng,
        );
        Ok(Self {
            encoder,
            question,
            classifier,
        })
    }

    /// Logits from precomputed image features `[N, D_I]`.
    pub fn logits_from_features<T: Scalar>(&self, t: &mut Tape<T>, v: Var, questions: &[Vec<usize>]) -> Result<Var> {
        let q = self.question.forward(t, questions)?;
        let p = fuse(t, v, q)?;
        self.classifier.forward(t, p)
    }

    pub fn logits<T: Scalar>(&self, t: &mut Tape<T>, x: Var, questions: &[Vec<usize>]) -> Result<Var> {
        let v = self.encoder.forward(t, x)?;
        self.logits_from_features(t, v, questions)
    }

    /// Logits `[N, 3]` evaluated in chunks with fixed parameters.
    pub fn answer_scores(&self, store: &ParamStore, images: &Tensor, questions: &[Vec<usize>]) -> Result<Tensor> {
        let n = images.shape().first().copied().unwrap_or(0);
        if questions.len() != n {
            return Err(shape_err("answer_scores", &[n], &[questions.len()]));
        }
        let mut out = Vec::with_capacity(n * ANSWERS);
        let mut start = 0;
        while start < n {
            let end = (start + 64).min(n);
            let chunk = images.select_rows(start, end)?;
            let y = crate::nn::eval_with(store, |t| {
                let x = t.constant(chunk);
                self.logits(t, x, &questions[start..end])
            })?;
            out.extend_from_slice(y.data());
            start = end;
        }
        Tensor::new(vec![n, ANSWERS], out)
    }
}

/// Tracks the best validation metric and signals when patience runs out.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    bad_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Records the metric for `epoch`; only strict improvements reset patience.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        let improved = self.best.is_none_or(|b| metric > b);
        if improved {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        StopDecision {
            improved,
            stop: self.bad_epochs >= self.patience,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqaTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub patience: usize,
    /// Update image-encoder parameters; when false they stay bit-identical.
    pub finetune_encoder: bool,
}

impl Default for VqaTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            patience: 5,
            finetune_encoder: true,
        }
    }
}

impl VqaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Config("train.patience must be at least 1".into()));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("train.batch_size and train.lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f32,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqaOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(logits: &Tensor, answers: &[usize]) -> f64 {
    let a = logits.shape().get(1).copied().unwrap_or(1).max(1);
    let hits = logits
        .data()
        .chunks(a)
        .zip(answers)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    hits as f64 / answers.len().max(1) as f64
}

/// Supervised training with early stopping on validation accuracy. On
/// success `store` holds the parameters of the best validation epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_vqa<R: Rng + ?Sized>(
    model: &VqaModel,
    store: &mut ParamStore,
    adam: &mut AdamState,
    train: &QaSet,
    val: &QaSet,
    cfg: &VqaTrainConfig,
    rng: &mut R,
    mut on_epoch: impl FnMut(&EpochRecord, &ParamStore),
) -> Result<VqaOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Invalid("validation split is empty".into()));
    }
    // A frozen encoder sees each image once.
    let features = if cfg.finetune_encoder {
        None
    } else {
        Some((
            encode_all(model, store, &train.images)?,
            encode_all(model, store, &val.images)?,
        ))
    };
    let trainable = |name: &str| cfg.finetune_encoder || !name.starts_with("enc.");
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = store.clone();
    let mut history = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0f64;
        let mut hits = 0usize;
        for idx in epoch_batches(train.len(), cfg.batch_size, false, rng) {
            let questions: Vec<Vec<usize>> = idx.iter().map(|&i| train.questions[i].clone()).collect();
            let answers: Vec<usize> = idx.iter().map(|&i| train.answers[i]).collect();
            let mut t = Tape::new();
            t.bind(store, true);
            let logits = match &features {
                Some((f, _)) => {
                    let v = t.constant(f.gather_rows(&idx)?);
                    model.logits_from_features(&mut t, v, &questions)?
                }
                None => {
                    let x = t.constant(train.images.gather_rows(&idx)?);
                    model.logits(&mut t, x, &questions)?
                }
            };
            let loss = cross_entropy(&mut t, logits, &one_hot(&answers, ANSWERS)?)?;
            t.check_finite(loss, "vqa loss")?;
            let mut g = t.backward(loss)?;
            adam.step_masked(store, &g.param_grads(store), cfg.lr, trainable)?;
            loss_sum += t.value(loss).data()[0] as f64 * idx.len() as f64;
            hits += (accuracy(t.value(logits), &answers) * idx.len() as f64).round() as usize;
        }
        let val_logits = match &features {
            Some((_, f)) => crate::nn::eval_with(store, |t| {
                let v = t.constant(f.clone());
                model.logits_from_features(t, v, &val.questions)
            })?,
            None => model.answer_scores(store, &val.images, &val.questions)?,
        };
        let rec = EpochRecord {
            epoch,
            train_loss: (loss_sum / train.len() as f64) as f32,
            train_accuracy: hits as f64 / train.len() as f64,
            val_accuracy: accuracy(&val_logits, &val.answers),
        };
        on_epoch(&rec, store);
        let d = stopper.observe(epoch, rec.val_accuracy);
        history.push(rec);
        if d.improved {
            best = store.clone();
        }
        if d.stop {
            break;
        }
    }
    if !history.is_empty() {
        *store = best;
    }
    Ok(VqaOutcome {
        history,
        best_epoch: stopper.best_epoch,
        best_val_accuracy: stopper.best.unwrap_or(0.0),
    })
}

fn encode_all(model: &VqaModel, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
    let n = images.shape()[0];
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + 64).min(n);
        parts.push(model.encoder.encode(store, &images.select_rows(start, end)?)?);
        start = end;
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat_rows(&refs)
}

/// One prediction with its max-softmax confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceRecord {
    pub example_id: usize,
    pub confidence: f64,
    pub correct: bool,
    pub predicted: usize,
    pub answer: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeAccuracy {
    pub count: usize,
    pub correct: usize,
}

impl ShapeAccuracy {
    pub fn accuracy(&self) -> Option<f64> {
        (self.count > 0).then(|| self.correct as f64 / self.count as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub split: String,
    pub seed: u64,
    pub n: usize,
    pub accuracy: f64,
    /// Indexed by answer: sphere, cube, cylinder.
    pub per_shape: [ShapeAccuracy; ANSWERS],
    pub ece: f64,
    pub records: Vec<ConfidenceRecord>,
}

impl MetricsReport {
    pub fn shape_accuracy(&self, shape: Shape) -> Option<f64> {
        shape.answer_index().and_then(|i| self.per_shape[i].accuracy())
    }
}

fn softmax_row(row: &[f32]) -> Vec<f64> {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = row.iter().map(|&v| libm::exp(v as f64 - m)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Accuracy, per-shape breakdown, calibration and confidence records.
pub fn evaluate_logits(logits: &Tensor, answers: &[usize], ids: &[usize]) -> Result<MetricsReport> {
    let n = answers.len();
    if logits.shape() != [n, ANSWERS] || ids.len() != n {
        return Err(shape_err("evaluate", logits.shape(), &[n, ANSWERS]));
    }
    if n == 0 {
        return Err(Error::Invalid("cannot evaluate an empty split".into()));
    }
    let mut per_shape = [ShapeAccuracy { count: 0, correct: 0 }; ANSWERS];
    let mut records = Vec::with_capacity(n);
    for (i, row) in logits.data().chunks(ANSWERS).enumerate() {
        let y = answers[i];
        if y >= ANSWERS {
            return Err(Error::Index { index: y, size: ANSWERS });
        }
        let p = softmax_row(row);
        let predicted = argmax(row);
        let correct = predicted == y;
        per_shape[y].count += 1;
        per_shape[y].correct += correct as usize;
        records.push(ConfidenceRecord {
            example_id: ids[i],
            confidence: p[predicted],
            correct,
            predicted,
            answer: y,
        });
    }
    let conf: Vec<f64> = records.iter().map(|r| r.confidence).collect();
    let hit: Vec<bool> = records.iter().map(|r| r.correct).collect();
    let correct: usize = per_shape.iter().map(|s| s.correct).sum();
    Ok(MetricsReport {
        split: String::new(),
        seed: 0,
        n,
        accuracy: correct as f64 / n as f64,
        per_shape,
        ece: ece(&conf, &hit, 10)?,
        records,
    })
}

pub fn evaluate(model: &VqaModel, store: &ParamStore, set: &QaSet) -> Result<MetricsReport> {
    let logits = model.answer_scores(store, &set.images, &set.questions)?;
    evaluate_logits(&logits, &set.answers, &set.ids)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

/// Equal-width right-closed bins `(lo, hi]`; confidence 0 joins the first bin.
pub fn calibration_bins(confidences: &[f64], correct: &[bool], m: usize) -> Result<Vec<CalibrationBin>> {
    if confidences.len() != correct.len() {
        return Err(shape_err("ece", &[confidences.len()], &[correct.len()]));
    }
    if confidences.is_empty() {
        return Err(Error::Invalid("calibration of zero predictions".into()));
    }
    if m == 0 {
        return Err(Error::Config("calibration needs at least one bin".into()));
    }
    let mut count = vec![0usize; m];
    let mut hits = vec![0usize; m];
    let mut conf = vec![0.0f64; m];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Invalid(format!("confidence {c} outside [0, 1]")));
        }
        let b = (libm::ceil(c * m as f64) as usize).clamp(1, m) - 1;
        count[b] += 1;
        hits[b] += ok as usize;
        conf[b] += c;
    }
    Ok((0..m)
        .map(|b| CalibrationBin {
            lo: b as f64 / m as f64,
            hi: (b + 1) as f64 / m as f64,
            count: count[b],
            accuracy: if count[b] > 0 { hits[b] as f64 / count[b] as f64 } else { 0.0 },
            confidence: if count[b] > 0 { conf[b] / count[b] as f64 } else { 0.0 },
        })
        .collect())
}

/// Expected calibration error over `m` bins.
pub fn ece(confidences: &[f64], correct: &[bool], m: usize) -> Result<f64> {
    let n = confidences.len() as f64;
    Ok(calibration_bins(confidences, correct, m)?
        .iter()
        .map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs())
        .sum())
}
