//! Experiment commands. Each takes the resolved configuration and the run
//! directory it writes into.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sslab_core::codec::Checkpoint;
use sslab_core::contrastive::{pretrain_cl, ClModel, ContrastiveConfig};
use sslab_core::data::{
    combo_set, generate_ood_set, item_seed, Color, ComboSet, Image, Shape, SplitKind, SplitScheme,
    Vocabulary, IMAGE_SIZE,
};
use sslab_core::ebm::{input_gradient, pretrain_ebm, sample_chain, EbmModel, ReplayBuffer};
use sslab_core::energy_supervised::{cebm_sample, class_buffers, train_cebm, train_jem, CebmModel};
use sslab_core::kv::KvMap;
use sslab_core::nn::{AdamState, EncoderConfig, HeadInit, QuestionEncoderConfig};
use sslab_core::ood::{auroc, histogram, logit_energy, ood_scores, score_range, ScoreSource, Scorer};
use sslab_core::vqa::{calibration_bins, ece, evaluate_logits, train_vqa, MetricsReport, QaSet, VqaModel, ANSWERS};
use sslab_core::{ParamStore, Tensor};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{RunConfig, SourceChoice};
use crate::dataset::{ingest_external_images, load_images, load_qa, read_info, read_manifest, write_dataset, ManifestRecord};
use crate::error::{AppError, AppResult};
use crate::ppm::{grid, write_ppm};
use crate::tables::{
    write_csv, write_json, AurocSummary, CalibrationRow, ClRow, ConfidenceRow, EbmRow, EnergyRow, HistogramCsvRow,
    MetricsJson, MetricsRow, ScoreRow, ShapeSummary, TrainRow,
};

const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_SUBSET: u64 = 3;
const STREAM_SAMPLES: u64 = 4;
const STREAM_OOD: u64 = 5;

pub const LAST_GOOD: &str = "last_good.ssck";

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(item_seed(seed, stream, 0))
}

/// Dataset directory from `data.dir`; commands that consume data cannot run
/// without it.
pub fn data_dir(cfg: &RunConfig) -> AppResult<PathBuf> {
    let dir = cfg
        .path("data.dir")
        .ok_or_else(|| AppError::Missing("data.dir is not set; run gen-data first".into()))?;
    read_info(&dir)?;
    Ok(dir)
}

fn dataset_scheme(dir: &Path) -> AppResult<SplitScheme> {
    Ok(read_info(dir)?.scheme.parse()?)
}

// ---------------------------------------------------------------- models

/// Architecture keys stored in every checkpoint and checked on load.
fn arch_kv(
    kind: &str,
    enc: &EncoderConfig,
    question: Option<&QuestionEncoderConfig>,
    hidden: Option<usize>,
    cl: Option<&ContrastiveConfig>,
) -> KvMap {
    let mut kv = KvMap::new();
    kv.set("model.kind", kind);
    enc.write_kv(&mut kv, "encoder");
    if let Some(q) = question {
        q.write_kv(&mut kv, "question");
    }
    if let Some(h) = hidden {
        kv.set("classifier.hidden", h);
    }
    if let Some(c) = cl {
        kv.set("cl.projection_hidden", c.projection_hidden);
        kv.set("cl.projection_dim", c.projection_dim);
    }
    kv
}

fn encoder_kv(enc: &EncoderConfig) -> KvMap {
    let mut kv = KvMap::new();
    enc.write_kv(&mut kv, "encoder");
    kv
}

#[derive(Clone, Debug)]
pub enum Model {
    Ebm(EbmModel),
    Cl(ClModel),
    Vqa(VqaModel),
    Cebm(CebmModel),
}

#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub kind: String,
    pub model: Model,
    pub store: ParamStore,
}

/// Rebuilds the model described by a checkpoint and fills in its weights.
pub fn load_model(path: &Path) -> AppResult<LoadedModel> {
    let ck = load_checkpoint(path)?;
    let c = &ck.config;
    let kind: String = c.get("model.kind")?;
    let enc = EncoderConfig::read_kv(c, "encoder")?;
    let mut store = ParamStore::new();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let model = match kind.as_str() {
        "ebm" => Model::Ebm(EbmModel::new(&mut store, &enc, &mut r)?),
        "cl" => {
            let cl = ContrastiveConfig {
                projection_hidden: c.get("cl.projection_hidden")?,
                projection_dim: c.get("cl.projection_dim")?,
                ..ContrastiveConfig::default()
            };
            Model::Cl(ClModel::new(&mut store, &enc, &cl, &mut r)?)
        }
        "vqa" => {
            let q = QuestionEncoderConfig::read_kv(c, "question")?;
            let hidden = c.get("classifier.hidden")?;
            Model::Vqa(VqaModel::new(&mut store, &enc, &q, hidden, HeadInit::Kaiming, &mut r)?)
        }
        "cebm" => {
            let q = QuestionEncoderConfig::read_kv(c, "question")?;
            Model::Cebm(CebmModel::new(&mut store, &enc, &q, &mut r)?)
        }
        k => return Err(AppError::Format(format!("{}: unknown model kind {k}", path.display()))),
    };
    let copied = store.copy_prefix_from(&ck.params, "")?;
    if copied != store.len() || ck.params.len() != store.len() {
        return Err(AppError::Format(format!(
            "{}: checkpoint holds {} tensors, the {kind} model needs {}",
            path.display(),
            ck.params.len(),
            store.len()
        )));
    }
    Ok(LoadedModel { kind, model, store })
}

/// Copies the image encoder of `init.checkpoint`, if set, into `store`.
fn init_encoder(cfg: &RunConfig, enc: &EncoderConfig, store: &mut ParamStore) -> AppResult<Option<PathBuf>> {
    let Some(path) = cfg.path("init.checkpoint") else {
        return Ok(None);
    };
    let ck = load_checkpoint(&path)?;
    ck.check_architecture(&encoder_kv(enc))?;
    let n = store.copy_prefix_from(&ck.params, "enc.")?;
    if n == 0 {
        return Err(AppError::Format(format!("{} holds no image encoder", path.display())));
    }
    log::info!("initialized {n} encoder tensors from {}", path.display());
    Ok(Some(path))
}

fn save(path: &Path, config: &KvMap, store: &ParamStore, adam: Option<&AdamState>) -> AppResult<()> {
    let ck = Checkpoint {
        config: config.clone(),
        params: store.clone(),
        adam: adam.cloned(),
    };
    save_checkpoint(path, &ck)
}

// ---------------------------------------------------------------- subsets

/// Class-balanced subset: `round(fraction * count)` examples of each answer
/// (at least one per present answer), chosen by a seeded shuffle and
/// returned in ascending order.
pub fn balanced_subset(answers: &[usize], fraction: f64, seed: u64) -> Vec<usize> {
    if fraction >= 1.0 {
        return (0..answers.len()).collect();
    }
    let mut r = rng(seed, STREAM_SUBSET);
    let mut out = Vec::new();
    for class in 0..ANSWERS {
        let mut idx: Vec<usize> = (0..answers.len()).filter(|&i| answers[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut r);
        let k = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len());
        out.extend_from_slice(&idx[..k]);
    }
    out.sort_unstable();
    out
}

/// Seeded subset of `n` unlabelled items of size `ceil(fraction * n)`.
pub fn random_subset(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    if fraction >= 1.0 {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng(seed, STREAM_SUBSET));
    let k = ((fraction * n as f64).ceil() as usize).clamp(1.min(n), n);
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    out
}

// ---------------------------------------------------------------- evaluation

/// Metrics of one split plus everything written about it.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub row: MetricsRow,
    pub json: MetricsJson,
    pub confidences: Vec<ConfidenceRow>,
}

fn shape_name(i: usize) -> &'static str {
    Shape::ANSWERS[i].name()
}

/// Scores a labelled split from its logits. Examples whose shape/color
/// combination is not a training combination form the OOD subset.
pub fn evaluate_split(
    logits: &Tensor,
    set: &QaSet,
    records: &[ManifestRecord],
    kind: SplitKind,
    scheme: SplitScheme,
    seed: u64,
    bins: usize,
) -> AppResult<Evaluation> {
    let mut report = evaluate_logits(logits, &set.answers, &set.ids)?;
    report.split = kind.name().to_string();
    report.seed = seed;
    let conf: Vec<f64> = report.records.iter().map(|r| r.confidence).collect();
    let hit: Vec<bool> = report.records.iter().map(|r| r.correct).collect();
    report.ece = ece(&conf, &hit, bins)?;
    let calibration: Vec<CalibrationRow> = calibration_bins(&conf, &hit, bins)?.iter().map(Into::into).collect();

    let seen = combo_set(scheme, ComboSet::Seen);
    let mut ood = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let shape: Shape = r.shape.parse()?;
        let color: Color = r.color.parse()?;
        if !seen.contains(&(shape, color)) {
            ood.push(i);
        }
    }
    let (ood_accuracy, ood_ece) = if ood.is_empty() {
        (None, None)
    } else {
        let c: Vec<f64> = ood.iter().map(|&i| conf[i]).collect();
        let h: Vec<bool> = ood.iter().map(|&i| hit[i]).collect();
        let acc = h.iter().filter(|&&v| v).count() as f64 / h.len() as f64;
        (Some(acc), Some(ece(&c, &h, bins)?))
    };

    let row = MetricsRow {
        split: report.split.clone(),
        n: report.n,
        accuracy: report.accuracy,
        accuracy_sphere: report.per_shape[0].accuracy(),
        accuracy_cube: report.per_shape[1].accuracy(),
        accuracy_cylinder: report.per_shape[2].accuracy(),
        ece: report.ece,
        ood_n: ood.len(),
        ood_accuracy,
        ood_ece,
    };
    let per_shape: BTreeMap<String, ShapeSummary> = report
        .per_shape
        .iter()
        .enumerate()
        .map(|(i, s)| {
            (
                shape_name(i).to_string(),
                ShapeSummary {
                    count: s.count,
                    correct: s.correct,
                    accuracy: s.accuracy(),
                },
            )
        })
        .collect();
    let json = MetricsJson {
        split: report.split.clone(),
        seed,
        n: report.n,
        accuracy: report.accuracy,
        per_shape,
        ece: report.ece,
        ood_n: ood.len(),
        ood_accuracy,
        ood_ece,
        calibration,
    };
    let confidences = report
        .records
        .iter()
        .zip(records)
        .map(|(r, m)| ConfidenceRow {
            example_id: r.example_id,
            confidence: r.confidence,
            correct: r.correct,
            predicted: shape_name(r.predicted).to_string(),
            answer: shape_name(r.answer).to_string(),
            shape: m.shape.clone(),
        })
        .collect();
    Ok(Evaluation {
        report,
        row,
        json,
        confidences,
    })
}

/// Writes `metrics.csv` with one row per split and per-split JSON and
/// confidence files.
pub fn write_evaluations(run: &Path, evals: &[Evaluation]) -> AppResult<()> {
    let rows: Vec<MetricsRow> = evals.iter().map(|e| e.row.clone()).collect();
    write_csv(&run.join("metrics.csv"), &rows)?;
    for e in evals {
        let s = &e.row.split;
        write_json(&run.join(format!("metrics_{s}.json")), &e.json)?;
        write_csv(&run.join(format!("confidences_{s}.csv")), &e.confidences)?;
    }
    Ok(())
}

/// Labelled split with its manifest.
pub struct LabelledSplit {
    pub kind: SplitKind,
    pub set: QaSet,
    pub records: Vec<ManifestRecord>,
}

pub fn load_labelled(dir: &Path, kind: SplitKind) -> AppResult<LabelledSplit> {
    Ok(LabelledSplit {
        kind,
        set: load_qa(dir, kind)?,
        records: read_manifest(dir, kind)?,
    })
}

fn evaluate_with(
    logits: impl Fn(&QaSet) -> AppResult<Tensor>,
    splits: &[&LabelledSplit],
    scheme: SplitScheme,
    seed: u64,
    bins: usize,
) -> AppResult<Vec<Evaluation>> {
    splits
        .iter()
        .map(|s| evaluate_split(&logits(&s.set)?, &s.set, &s.records, s.kind, scheme, seed, bins))
        .collect()
}

fn cebm_logits(model: &CebmModel, store: &ParamStore, set: &QaSet) -> AppResult<Tensor> {
    let e = model.energy_table(store, &set.images, &set.questions)?;
    Ok(e.map(|v| -v))
}

fn accuracy_of(evals: &[Evaluation], kind: SplitKind) -> Option<&Evaluation> {
    evals.iter().find(|e| e.row.split == kind.name())
}

// ---------------------------------------------------------------- gen-data

#[derive(Clone, Debug)]
pub struct GenDataOutcome {
    pub dir: PathBuf,
    pub counts: BTreeMap<String, usize>,
}

/// Renders every split into `data.dir`, or `<run>/data` when unset.
pub fn gen_data(cfg: &RunConfig, run: &Path) -> AppResult<GenDataOutcome> {
    let dir = cfg.path("data.dir").unwrap_or_else(|| run.join("data"));
    let info = write_dataset(&dir, &cfg.split_config()?)?;
    Ok(GenDataOutcome { dir, counts: info.counts })
}

// ---------------------------------------------------------------- pretraining

fn image_grid_from_rows(rows: &[&[f32]]) -> AppResult<Option<Image>> {
    if rows.is_empty() {
        return Ok(None);
    }
    let images = rows
        .iter()
        .map(|r| Image::from_chw(IMAGE_SIZE, IMAGE_SIZE, r))
        .collect::<sslab_core::Result<Vec<_>>>()?;
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    Ok(Some(grid(&images, cols)?))
}

fn write_tensor_grid(path: &Path, t: &Tensor) -> AppResult<()> {
    let images = Image::from_batch_tensor(t)?;
    if images.is_empty() {
        return Ok(());
    }
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    write_ppm(path, &grid(&images, cols)?)
}

fn buffer_grid(path: &Path, buffer: &ReplayBuffer, count: usize) -> AppResult<()> {
    let n = buffer.len();
    let k = count.min(n);
    let rows: Vec<&[f32]> = (0..k).filter_map(|i| buffer.get(i * n / k.max(1))).collect();
    if let Some(img) = image_grid_from_rows(&rows)? {
        write_ppm(path, &img)?;
    }
    Ok(())
}

fn pretrain_images(cfg: &RunConfig, dir: &Path) -> AppResult<Tensor> {
    let records = read_manifest(dir, SplitKind::Pretrain)?;
    let keep = random_subset(records.len(), cfg.pretrain_fraction()?, cfg.seed()?);
    let subset: Vec<ManifestRecord> = keep.iter().map(|&i| records[i].clone()).collect();
    log::info!("pretraining on {} of {} images", subset.len(), records.len());
    load_images(dir, &subset)
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub steps: usize,
    pub final_loss: f32,
}

/// Contrastive-divergence pretraining of an energy model.
pub fn run_pretrain_ebm(cfg: &RunConfig, run: &Path) -> AppResult<PretrainOutcome> {
    let dir = data_dir(cfg)?;
    let images = pretrain_images(cfg, &dir)?;
    let seed = cfg.seed()?;
    let enc = cfg.encoder()?;
    let tc = cfg.ebm()?;
    let every = cfg.ebm_checkpoint_every()?;
    let count = cfg.sample_count()?;
    let arch = arch_kv("ebm", &enc, None, None, None);
    let mut store = ParamStore::new();
    let model = EbmModel::new(&mut store, &enc, &mut rng(seed, STREAM_INIT))?;
    init_encoder(cfg, &enc, &mut store)?;
    let mut adam = AdamState::new(&store);
    let mut buffer = ReplayBuffer::new(tc.buffer_capacity, tc.reinit_prob);
    let mut r = rng(seed, STREAM_TRAIN);
    let last_good = run.join(LAST_GOOD);
    let mut rows: Vec<EbmRow> = Vec::new();
    let epoch_cfg = sslab_core::ebm::EbmTrainConfig { epochs: 1, ..tc.clone() };
    for epoch in 1..=tc.epochs {
        let offset = rows.len();
        let mut save_err = None;
        let result = pretrain_ebm(&model, &mut store, &mut adam, &mut buffer, &images, &epoch_cfg, &mut r, |rec, s| {
            let step = offset + rec.step;
            rows.push(EbmRow::new(step, rec));
            if every > 0 && step % every == 0 {
                if let Err(e) = save(&last_good, &arch, s, None) {
                    save_err.get_or_insert(e);
                }
            }
        });
        if let Err(e) = result {
            write_csv(&run.join("history.csv"), &rows)?;
            return Err(AppError::from(e).with_checkpoint(&last_good));
        }
        if let Some(e) = save_err {
            return Err(e);
        }
        save(&last_good, &arch, &store, Some(&adam))?;
        buffer_grid(&run.join(format!("samples_e{epoch:03}.ppm")), &buffer, count)?;
        let last = rows.last();
        log::info!(
            "ebm epoch {epoch}/{}: loss {:.4} E_real {:.3} E_fake {:.3}",
            tc.epochs,
            last.map_or(f32::NAN, |r| r.loss),
            last.map_or(f32::NAN, |r| r.mean_e_real),
            last.map_or(f32::NAN, |r| r.mean_e_fake)
        );
    }
    write_csv(&run.join("history.csv"), &rows)?;
    buffer_grid(&run.join("samples.ppm"), &buffer, count)?;
    let checkpoint = run.join("ebm.ssck");
    save(&checkpoint, &arch, &store, Some(&adam))?;
    Ok(PretrainOutcome {
        checkpoint,
        steps: rows.len(),
        final_loss: rows.last().map_or(f32::NAN, |r| r.loss),
    })
}

/// Contrastive pretraining of the image encoder.
pub fn run_pretrain_cl(cfg: &RunConfig, run: &Path) -> AppResult<PretrainOutcome> {
    let dir = data_dir(cfg)?;
    let images = pretrain_images(cfg, &dir)?;
    let seed = cfg.seed()?;
    let enc = cfg.encoder()?;
    let cc = cfg.contrastive()?;
    let arch = arch_kv("cl", &enc, None, None, Some(&cc));
    let mut store = ParamStore::new();
    let model = ClModel::new(&mut store, &enc, &cc, &mut rng(seed, STREAM_INIT))?;
    init_encoder(cfg, &enc, &mut store)?;
    let mut adam = AdamState::new(&store);
    let mut r = rng(seed, STREAM_TRAIN);
    let last_good = run.join(LAST_GOOD);
    let mut rows: Vec<ClRow> = Vec::new();
    let epoch_cfg = ContrastiveConfig { epochs: 1, ..cc.clone() };
    for epoch in 1..=cc.epochs {
        let offset = rows.len();
        let result = pretrain_cl(&model, &mut store, &mut adam, &images, &epoch_cfg, &mut r, |rec, _| {
            let mut row = ClRow::from(rec);
            row.step += offset;
            rows.push(row);
        });
        if let Err(e) = result {
            write_csv(&run.join("history.csv"), &rows)?;
            return Err(AppError::from(e).with_checkpoint(&last_good));
        }
        save(&last_good, &arch, &store, Some(&adam))?;
        let epoch_rows = &rows[offset..];
        let mean_loss = epoch_rows.iter().map(|r| r.loss).sum::<f32>() / epoch_rows.len().max(1) as f32;
        log::info!("cl epoch {epoch}/{}: mean loss {mean_loss:.4}", cc.epochs);
    }
    write_csv(&run.join("history.csv"), &rows)?;
    let checkpoint = run.join("cl.ssck");
    save(&checkpoint, &arch, &store, Some(&adam))?;
    Ok(PretrainOutcome {
        checkpoint,
        steps: rows.len(),
        final_loss: rows.last().map_or(f32::NAN, |r| r.loss),
    })
}

// ---------------------------------------------------------------- supervised

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub train_examples: usize,
    pub best_epoch: usize,
    pub evaluations: Vec<Evaluation>,
}

impl TrainOutcome {
    pub fn split(&self, kind: SplitKind) -> Option<&MetricsRow> {
        accuracy_of(&self.evaluations, kind).map(|e| &e.row)
    }
}

fn vqa_model(cfg: &RunConfig, store: &mut ParamStore) -> AppResult<(VqaModel, KvMap, EncoderConfig)> {
    let enc = cfg.encoder()?;
    let q = cfg.question()?;
    let hidden = cfg.classifier_hidden()?;
    let model = VqaModel::new(store, &enc, &q, hidden, cfg.head_init()?, &mut rng(cfg.seed()?, STREAM_INIT))?;
    Ok((model, arch_kv("vqa", &enc, Some(&q), Some(hidden), None), enc))
}

/// Supervised training of the question-answering model, optionally from a
/// pretrained encoder, on a class-balanced fraction of the training split.
pub fn run_finetune(cfg: &RunConfig, run: &Path) -> AppResult<TrainOutcome> {
    let dir = data_dir(cfg)?;
    let scheme = dataset_scheme(&dir)?;
    let seed = cfg.seed()?;
    let full = load_qa(&dir, SplitKind::Train)?;
    let keep = balanced_subset(&full.answers, cfg.train_fraction()?, seed);
    let train = full.subset(&keep)?;
    let val = load_labelled(&dir, SplitKind::Validation)?;
    let test = load_labelled(&dir, SplitKind::Test)?;
    log::info!("fine-tuning on {} of {} examples", train.len(), full.len());

    let mut store = ParamStore::new();
    let (model, arch, enc) = vqa_model(cfg, &mut store)?;
    init_encoder(cfg, &enc, &mut store)?;
    let mut adam = AdamState::new(&store);
    let tc = cfg.vqa_train()?;
    let last_good = run.join(LAST_GOOD);
    let mut rows = Vec::new();
    let mut save_err = None;
    let result = train_vqa(&model, &mut store, &mut adam, &train, &val.set, &tc, &mut rng(seed, STREAM_TRAIN), |rec, s| {
        log::info!(
            "epoch {}: loss {:.4} train {:.3} val {:.3}",
            rec.epoch,
            rec.train_loss,
            rec.train_accuracy,
            rec.val_accuracy
        );
        rows.push(TrainRow::from(rec));
        if let Err(e) = save(&last_good, &arch, s, None) {
            save_err.get_or_insert(e);
        }
    });
    write_csv(&run.join("history.csv"), &rows)?;
    let outcome = result.map_err(|e| AppError::from(e).with_checkpoint(&last_good))?;
    if let Some(e) = save_err {
        return Err(e);
    }
    let checkpoint = run.join("model.ssck");
    save(&checkpoint, &arch, &store, Some(&adam))?;
    let evaluations = evaluate_with(
        |s| Ok(model.answer_scores(&store, &s.images, &s.questions)?),
        &[&val, &test],
        scheme,
        seed,
        cfg.eval_bins()?,
    )?;
    write_evaluations(run, &evaluations)?;
    Ok(TrainOutcome {
        checkpoint,
        train_examples: train.len(),
        best_epoch: outcome.best_epoch,
        evaluations,
    })
}

/// Scores one labelled split with `model.checkpoint`, or with a freshly
/// initialized model when no checkpoint is given.
pub fn run_evaluate(cfg: &RunConfig, run: &Path) -> AppResult<Evaluation> {
    let dir = data_dir(cfg)?;
    let scheme = dataset_scheme(&dir)?;
    let seed = cfg.seed()?;
    let split = load_labelled(&dir, cfg.eval_split()?)?;
    let bins = cfg.eval_bins()?;
    let logits = match cfg.path("model.checkpoint") {
        None => {
            log::info!("no model.checkpoint; evaluating an untrained model");
            let mut store = ParamStore::new();
            let (model, _, _) = vqa_model(cfg, &mut store)?;
            model.answer_scores(&store, &split.set.images, &split.set.questions)?
        }
        Some(path) => {
            let m = load_model(&path)?;
            match &m.model {
                Model::Vqa(v) => v.answer_scores(&m.store, &split.set.images, &split.set.questions)?,
                Model::Cebm(c) => cebm_logits(c, &m.store, &split.set)?,
                _ => return Err(AppError::Usage(format!("cannot answer questions with a {} checkpoint", m.kind))),
            }
        }
    };
    let e = evaluate_split(&logits, &split.set, &split.records, split.kind, scheme, seed, bins)?;
    write_evaluations(run, std::slice::from_ref(&e))?;
    Ok(e)
}

/// Energy of each image under a JEM classifier (negative logsumexp).
fn jem_energies(model: &VqaModel, store: &ParamStore, set: &QaSet) -> AppResult<Vec<f32>> {
    let logits = model.answer_scores(store, &set.images, &set.questions)?;
    Ok(logit_energy(&logits).into_iter().map(|v| -v).collect())
}

fn extreme_grids(run: &Path, set: &QaSet, energies: &[f32], count: usize) -> AppResult<()> {
    let k = count.min(set.len());
    if k == 0 {
        return Ok(());
    }
    let mut order: Vec<usize> = (0..energies.len()).collect();
    order.sort_by(|&a, &b| energies[a].total_cmp(&energies[b]).then(a.cmp(&b)));
    let low: Vec<usize> = order[..k].to_vec();
    let high: Vec<usize> = order[order.len() - k..].iter().rev().copied().collect();
    write_tensor_grid(&run.join("low_energy.ppm"), &set.images.gather_rows(&low)?)?;
    write_tensor_grid(&run.join("high_energy.ppm"), &set.images.gather_rows(&high)?)
}

/// Joint energy-based training of the question-answering model.
pub fn run_jem(cfg: &RunConfig, run: &Path) -> AppResult<TrainOutcome> {
    let dir = data_dir(cfg)?;
    let scheme = dataset_scheme(&dir)?;
    let seed = cfg.seed()?;
    let full = load_qa(&dir, SplitKind::Train)?;
    let train = full.subset(&balanced_subset(&full.answers, cfg.train_fraction()?, seed))?;
    let val = load_labelled(&dir, SplitKind::Validation)?;
    let test = load_labelled(&dir, SplitKind::Test)?;
    let mut store = ParamStore::new();
    let (model, arch, enc) = vqa_model(cfg, &mut store)?;
    init_encoder(cfg, &enc, &mut store)?;
    let mut adam = AdamState::new(&store);
    let jc = cfg.jem()?;
    let last_good = run.join(LAST_GOOD);
    let mut rows = Vec::new();
    let mut save_err = None;
    let mut r = rng(seed, STREAM_TRAIN);
    let result = train_jem(&model, &mut store, &mut adam, &train, &val.set, &jc, &mut r, |rec, s| {
        log::info!(
            "jem epoch {}: ce {:.4} energy {:.4} E_real {:.3} E_fake {:.3} val {:.3}{}",
            rec.epoch,
            rec.ce_loss.unwrap_or(f32::NAN),
            rec.energy_loss,
            rec.mean_e_real,
            rec.mean_e_fake,
            rec.val_accuracy,
            if rec.stop_flag { " (diverged)" } else { "" }
        );
        rows.push(EnergyRow::from(rec));
        if let Err(e) = save(&last_good, &arch, s, None) {
            save_err.get_or_insert(e);
        }
    });
    write_csv(&run.join("history.csv"), &rows)?;
    let outcome = result.map_err(|e| AppError::from(e).with_checkpoint(&last_good))?;
    if let Some(e) = save_err {
        return Err(e);
    }
    if let Some(step) = outcome.stopped_at {
        log::info!("divergence stop fired at step {step}");
    }
    let checkpoint = run.join("model.ssck");
    save(&checkpoint, &arch, &store, Some(&adam))?;
    let evaluations = evaluate_with(
        |s| Ok(model.answer_scores(&store, &s.images, &s.questions)?),
        &[&val, &test],
        scheme,
        seed,
        cfg.eval_bins()?,
    )?;
    write_evaluations(run, &evaluations)?;

    let count = cfg.sample_count()?.min(test.set.len());
    if count > 0 {
        let questions: Vec<Vec<usize>> = test.set.questions[..count].to_vec();
        let mut sr = rng(seed, STREAM_SAMPLES);
        let (init, _) = ReplayBuffer::new(1, 1.0).draw(count, &[3, IMAGE_SIZE, IMAGE_SIZE], &mut sr)?;
        let samples = sample_chain(
            init,
            |x| {
                let (_, g) = input_gradient(&store, x, |t, xv| {
                    let y = model.logits(t, xv, &questions)?;
                    t.logsumexp(y, 1)
                })?;
                Ok(g)
            },
            &jc.langevin,
            &mut sr,
        )?;
        write_tensor_grid(&run.join("samples.ppm"), &samples)?;
        extreme_grids(run, &test.set, &jem_energies(&model, &store, &test.set)?, count)?;
    }
    Ok(TrainOutcome {
        checkpoint,
        train_examples: train.len(),
        best_epoch: outcome.best_epoch,
        evaluations,
    })
}

/// Conditional energy model trained from a pretrained encoder
/// (`init.checkpoint` is required).
pub fn run_cebm(cfg: &RunConfig, run: &Path) -> AppResult<TrainOutcome> {
    if cfg.path("init.checkpoint").is_none() {
        return Err(AppError::Missing("cebm needs init.checkpoint (a pretrained encoder)".into()));
    }
    let dir = data_dir(cfg)?;
    let scheme = dataset_scheme(&dir)?;
    let seed = cfg.seed()?;
    let full = load_qa(&dir, SplitKind::Train)?;
    let train = full.subset(&balanced_subset(&full.answers, cfg.train_fraction()?, seed))?;
    let val = load_labelled(&dir, SplitKind::Validation)?;
    let test = load_labelled(&dir, SplitKind::Test)?;
    let enc = cfg.encoder()?;
    let q = cfg.question()?;
    let arch = arch_kv("cebm", &enc, Some(&q), None, None);
    let mut store = ParamStore::new();
    let model = CebmModel::new(&mut store, &enc, &q, &mut rng(seed, STREAM_INIT))?;
    init_encoder(cfg, &enc, &mut store)?;
    // Fréchet features come from the frozen pretrained encoder.
    let feature_store = store.clone();
    let feature_encoder = model.encoder.clone();
    let mut adam = AdamState::new(&store);
    let cc = cfg.cebm()?;
    let last_good = run.join(LAST_GOOD);
    let mut rows = Vec::new();
    let mut save_err = None;
    let mut r = rng(seed, STREAM_TRAIN);
    let result = train_cebm(
        &model,
        &mut store,
        &mut adam,
        &train,
        &val.set,
        &cc,
        |x| feature_encoder.encode(&feature_store, x),
        &mut r,
        |rec, s| {
            log::info!(
                "cebm epoch {}: loss {:.4} E_real {:.3} E_fake {:.3} frechet {} val {:.3}",
                rec.epoch,
                rec.energy_loss,
                rec.mean_e_real,
                rec.mean_e_fake,
                rec.frechet.map_or("-".to_string(), |v| format!("{v:.3}")),
                rec.val_accuracy
            );
            rows.push(EnergyRow::from(rec));
            if let Err(e) = save(&last_good, &arch, s, None) {
                save_err.get_or_insert(e);
            }
        },
    );
    write_csv(&run.join("history.csv"), &rows)?;
    let outcome = result.map_err(|e| AppError::from(e).with_checkpoint(&last_good))?;
    if let Some(e) = save_err {
        return Err(e);
    }
    if outcome.halted {
        log::info!("Fréchet distance plateaued; training halted");
    }
    let checkpoint = run.join("model.ssck");
    save(&checkpoint, &arch, &store, Some(&adam))?;
    let evaluations = evaluate_with(|s| cebm_logits(&model, &store, s), &[&val, &test], scheme, seed, cfg.eval_bins()?)?;
    write_evaluations(run, &evaluations)?;

    let count = cfg.sample_count()?.min(test.set.len());
    if count > 0 {
        let buffers = class_buffers(&cc);
        let mut sr = rng(seed, STREAM_SAMPLES);
        let questions: Vec<Vec<usize>> = test.set.questions[..count].to_vec();
        for (y, shape) in Shape::ANSWERS.iter().enumerate() {
            let labels = vec![y; count];
            let shape_sample = cebm_sample(
                &model,
                &store,
                &buffers,
                &questions,
                &labels,
                &[3, IMAGE_SIZE, IMAGE_SIZE],
                &cc.langevin,
                &mut sr,
            )?;
            write_tensor_grid(&run.join(format!("samples_{}.ppm", shape.name())), &shape_sample)?;
        }
    }
    Ok(TrainOutcome {
        checkpoint,
        train_examples: train.len(),
        best_epoch: outcome.best_epoch,
        evaluations,
    })
}

// ---------------------------------------------------------------- ood

#[derive(Clone, Debug)]
pub struct OodOutcome {
    pub summary: AurocSummary,
}

impl OodOutcome {
    pub fn auroc(&self, model: &str, source: &str) -> Option<f64> {
        let col = self.summary.sources.iter().position(|s| s == source)?;
        self.summary.rows.iter().find(|(m, _)| m == model).map(|(_, v)| v[col])
    }
}

fn tensor_of(images: &[Image]) -> AppResult<Tensor> {
    let refs: Vec<&Image> = images.iter().collect();
    Ok(Image::batch_tensor(&refs)?)
}

/// Pairs each of `n` images with a question, cycling through `pool`.
fn cyclic_questions(pool: &[Vec<usize>], n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|i| pool[i % pool.len()].clone()).collect()
}

/// Scores in-distribution images and each OOD source with every checkpoint
/// in `model.checkpoint` (comma separated).
pub fn run_ood(cfg: &RunConfig, run: &Path) -> AppResult<OodOutcome> {
    let dir = data_dir(cfg)?;
    let paths: Vec<PathBuf> = cfg
        .raw("model.checkpoint")
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(PathBuf::from)
        .collect();
    if paths.is_empty() {
        return Err(AppError::Missing("ood needs model.checkpoint".into()));
    }
    let seed = cfg.seed()?;
    let id_kind = cfg.ood_id_split()?;
    let id_records = read_manifest(&dir, id_kind)?;
    let id_images = load_images(&dir, &id_records)?;
    // Classifiers need questions: the ID split's own, else the test split's.
    let question_pool: Vec<Vec<usize>> = {
        let vocab = Vocabulary::default();
        let own: Vec<Vec<usize>> = id_records.iter().filter_map(|r| r.question.as_deref()).map(|q| vocab.encode(q)).collect();
        if own.len() == id_records.len() {
            own
        } else {
            load_qa(&dir, SplitKind::Test)?.questions
        }
    };
    let n = cfg.ood_n()?;
    let mut sources: Vec<(String, Tensor)> = Vec::new();
    for kind in cfg.ood_kinds()? {
        let set = generate_ood_set(kind, n, item_seed(seed, STREAM_OOD, kind as u64))?;
        sources.push((kind.name().to_string(), tensor_of(&set.images)?));
    }
    if let Some(ext) = cfg.path("ood.external_dir") {
        sources.push(("external".into(), tensor_of(&ingest_external_images(&ext)?)?));
    }
    if sources.is_empty() {
        return Err(AppError::Usage("no OOD sources: set ood.kinds or ood.external_dir".into()));
    }
    // Sample grids of every OOD source for inspection.
    for (name, t) in &sources {
        let k = t.shape()[0].min(cfg.sample_count()?.max(1));
        write_tensor_grid(&run.join(format!("ood_{name}.ppm")), &t.select_rows(0, k)?)?;
    }

    let bins = cfg.ood_bins()?;
    let mut summary = AurocSummary::default();
    let mut used: BTreeMap<String, usize> = BTreeMap::new();
    for path in &paths {
        let m = load_model(path)?;
        let source = match (cfg.ood_source()?, &m.model) {
            (SourceChoice::Fixed(s), _) => s,
            (SourceChoice::Auto, Model::Ebm(_)) => ScoreSource::Energy,
            (SourceChoice::Auto, Model::Vqa(_)) => ScoreSource::MaxSoftmax,
            _ => return Err(AppError::Usage(format!("cannot score images with a {} checkpoint", m.kind))),
        };
        let score = |images: &Tensor| -> AppResult<Vec<f32>> {
            let n = images.shape()[0];
            let qs = cyclic_questions(&question_pool, n);
            let scorer = match &m.model {
                Model::Ebm(e) => Scorer::Ebm(e),
                Model::Vqa(v) => Scorer::Vqa(v, &qs),
                _ => unreachable!(),
            };
            Ok(ood_scores(scorer, &m.store, images, source)?)
        };
        let base = format!("{}_{}", m.kind, source.name());
        let k = used.entry(base.clone()).or_insert(0);
        *k += 1;
        let label = if *k == 1 { base } else { format!("{base}_{k}") };

        let id_scores = score(&id_images)?;
        let mut score_rows: Vec<ScoreRow> = id_records
            .iter()
            .zip(&id_scores)
            .map(|(r, &s)| ScoreRow {
                example_id: r.index,
                score: s,
                is_id: true,
                dataset_kind: id_kind.name().to_string(),
            })
            .collect();
        let mut values = Vec::new();
        for (name, images) in &sources {
            let ood = score(images)?;
            let a = auroc(&id_scores, &ood)?;
            log::info!("{label} vs {name}: AUROC {a:.4}");
            values.push((name.clone(), a));
            let (hist, clamped) = histogram(&id_scores, &ood, bins, score_range(&id_scores, &ood))?;
            if clamped > 0 {
                log::warn!("{clamped} scores fell outside the histogram range");
            }
            let rows: Vec<HistogramCsvRow> = hist.iter().map(Into::into).collect();
            write_csv(&run.join(format!("histogram_{label}_{name}.csv")), &rows)?;
            score_rows.extend(ood.iter().enumerate().map(|(i, &s)| ScoreRow {
                example_id: i,
                score: s,
                is_id: false,
                dataset_kind: name.clone(),
            }));
        }
        write_csv(&run.join(format!("scores_{label}.csv")), &score_rows)?;
        summary.push(&label, &values)?;
    }
    summary.write(&run.join("auroc.csv"))?;
    Ok(OodOutcome { summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_fraction_keeps_everything() {
        let answers = vec![0, 1, 2, 0, 1, 2];
        assert_eq!(balanced_subset(&answers, 1.0, 3), (0..6).collect::<Vec<_>>());
        assert_eq!(random_subset(5, 1.0, 3), (0..5).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn balanced_subset_covers_each_class(
            answers in proptest::collection::vec(0usize..3, 1..200),
            fraction in 0.01f64..1.0,
            seed in any::<u64>(),
        ) {
            let idx = balanced_subset(&answers, fraction, seed);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(idx.iter().all(|&i| i < answers.len()));
            for c in 0..3 {
                let total = answers.iter().filter(|&&a| a == c).count();
                let picked = idx.iter().filter(|&&i| answers[i] == c).count();
                if total > 0 {
                    let want = ((fraction * total as f64).round() as usize).clamp(1, total);
                    prop_assert_eq!(picked, want);
                }
            }
            prop_assert_eq!(idx.clone(), balanced_subset(&answers, fraction, seed));
        }

        #[test]
        fn random_subset_size(n in 1usize..500, fraction in 0.01f64..1.0, seed in any::<u64>()) {
            let idx = random_subset(n, fraction, seed);
            prop_assert_eq!(idx.len(), ((fraction * n as f64).ceil() as usize).clamp(1, n));
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
