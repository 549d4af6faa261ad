//! Run configuration: a flat `key=value` map resolved from built-in
//! defaults, an optional config file and command-line flags, in increasing
//! precedence.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sslab_core::augment::AugmentConfig;
use sslab_core::contrastive::ContrastiveConfig;
use sslab_core::data::{SplitConfig, SplitKind, SplitScheme, Vocabulary};
use sslab_core::ebm::{EbmTrainConfig, LangevinConfig};
use sslab_core::energy_supervised::{CebmConfig, JemConfig};
use sslab_core::kv::KvMap;
use sslab_core::nn::{EncoderConfig, HeadInit, QuestionEncoderConfig};
use sslab_core::ood::ScoreSource;
use sslab_core::vqa::VqaTrainConfig;

use crate::error::{AppError, AppResult};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    kv: KvMap,
}

fn defaults() -> KvMap {
    let mut kv = KvMap::new();
    kv.set("seed", 0);

    let data = SplitConfig::default();
    kv.set("data.dir", "");
    kv.set("data.seed", data.seed);
    kv.set("data.scale", data.scale);
    kv.set("data.scheme", data.scheme.name());
    kv.set("data.pretrain", data.pretrain);
    kv.set("data.train", data.train);
    kv.set("data.validation", data.validation);
    kv.set("data.test", data.test);
    kv.set("data.pool_per_combo", data.pool_per_combo);

    EncoderConfig::default().write_kv(&mut kv, "encoder");
    let q = QuestionEncoderConfig::with_vocab(Vocabulary::default().len());
    kv.set("question.embed_dim", q.embed_dim);
    kv.set("question.hidden_dim", q.hidden_dim);
    kv.set("classifier.hidden", 128);
    kv.set("classifier.init", "kaiming");

    AugmentConfig::default().write_kv(&mut kv, "augment");
    let lv = LangevinConfig::default();
    kv.set("langevin.steps", lv.steps);
    kv.set("langevin.step_size", lv.step_size);
    kv.set("langevin.noise", "");
    kv.set("langevin.detach", lv.detach);

    let ebm = EbmTrainConfig::default();
    kv.set("ebm.epochs", ebm.epochs);
    kv.set("ebm.batch_size", ebm.batch_size);
    kv.set("ebm.lr", ebm.lr);
    kv.set("ebm.alpha", ebm.alpha);
    kv.set("ebm.buffer_capacity", ebm.buffer_capacity);
    kv.set("ebm.reinit_prob", ebm.reinit_prob);
    kv.set("ebm.checkpoint_every", 100);

    let cl = ContrastiveConfig::default();
    kv.set("cl.temperature", cl.temperature);
    kv.set("cl.batch_size", cl.batch_size);
    kv.set("cl.epochs", cl.epochs);
    kv.set("cl.lr", cl.lr);
    kv.set("cl.projection_hidden", cl.projection_hidden);
    kv.set("cl.projection_dim", cl.projection_dim);
    kv.set("pretrain.fraction", 1);

    let tr = VqaTrainConfig::default();
    kv.set("train.epochs", tr.epochs);
    kv.set("train.batch_size", tr.batch_size);
    kv.set("train.lr", tr.lr);
    kv.set("train.patience", tr.patience);
    kv.set("train.finetune_encoder", tr.finetune_encoder);
    kv.set("train.fraction", 1);

    let jem = JemConfig::default();
    kv.set("jem.epochs", jem.epochs);
    kv.set("jem.batch_size", jem.batch_size);
    kv.set("jem.lr", jem.lr);
    kv.set("jem.w", jem.w);
    kv.set("jem.delta", jem.delta);
    kv.set("jem.divergence_stop", jem.divergence_stop);
    kv.set("jem.window", jem.window);
    kv.set("jem.alpha", jem.alpha);
    kv.set("jem.patience", jem.patience);
    kv.set("jem.buffer_capacity", jem.buffer_capacity);
    kv.set("jem.reinit_prob", jem.reinit_prob);
    kv.set("jem.augment", false);

    let cebm = CebmConfig::default();
    kv.set("cebm.epochs", cebm.epochs);
    kv.set("cebm.batch_size", cebm.batch_size);
    kv.set("cebm.lr", cebm.lr);
    kv.set("cebm.alpha", cebm.alpha);
    kv.set("cebm.buffer_capacity", cebm.buffer_capacity);
    kv.set("cebm.reinit_prob", cebm.reinit_prob);
    kv.set("cebm.frechet_every", cebm.frechet_every);
    kv.set("cebm.frechet_samples", cebm.frechet_samples);

    kv.set("init.checkpoint", "");
    kv.set("model.checkpoint", "");
    kv.set("eval.split", "test");
    kv.set("eval.bins", 10);
    kv.set("ood.kinds", "noise,background,cone");
    kv.set("ood.n", 500);
    kv.set("ood.source", "auto");
    kv.set("ood.bins", 20);
    kv.set("ood.id_split", "test");
    kv.set("ood.external_dir", "");
    kv.set("samples.count", 16);

    kv.set("sweep.axis", "finetune_size");
    kv.set("sweep.fractions", "1,0.5,0.2,0.1,0.02");
    kv.set("sweep.seeds", 3);
    kv.set("sweep.method", "cl");
    kv.set("sweep.resume", "");
    kv
}

/// What a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    PretrainSize,
    FinetuneSize,
}

impl FromStr for SweepAxis {
    type Err = AppError;
    fn from_str(s: &str) -> AppResult<Self> {
        match s {
            "pretrain_size" => Ok(SweepAxis::PretrainSize),
            "finetune_size" => Ok(SweepAxis::FinetuneSize),
            _ => Err(AppError::Usage(format!("sweep.axis must be pretrain_size or finetune_size, got {s}"))),
        }
    }
}

/// Pretraining applied before fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pretraining {
    None,
    Cl,
    Ebm,
}

impl Pretraining {
    pub fn name(self) -> &'static str {
        match self {
            Pretraining::None => "none",
            Pretraining::Cl => "cl",
            Pretraining::Ebm => "ebm",
        }
    }
}

impl FromStr for Pretraining {
    type Err = AppError;
    fn from_str(s: &str) -> AppResult<Self> {
        match s {
            "none" => Ok(Pretraining::None),
            "cl" => Ok(Pretraining::Cl),
            "ebm" => Ok(Pretraining::Ebm),
            _ => Err(AppError::Usage(format!("sweep.method must be none, cl or ebm, got {s}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub fractions: Vec<f64>,
    pub seeds: usize,
    pub method: Pretraining,
}

/// Which image scores the `ood` command computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceChoice {
    /// Energy for energy models, max softmax for classifiers.
    Auto,
    Fixed(ScoreSource),
}

impl RunConfig {
    pub fn defaults() -> Self {
        Self { kv: defaults() }
    }

    /// Merges `file` and then `flags` over the defaults and validates the
    /// result.
    pub fn parse(file: Option<&Path>, flags: &[String]) -> AppResult<Self> {
        let mut cfg = Self::defaults();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| AppError::Usage(format!("cannot read config file {}: {e}", path.display())))?;
            let file_kv = KvMap::parse(&text).map_err(|e| AppError::Usage(format!("{}: {e}", path.display())))?;
            cfg.merge(&file_kv)?;
        }
        let mut flag_kv = KvMap::new();
        for f in flags {
            flag_kv
                .insert_pair(f)
                .map_err(|_| AppError::Usage(format!("expected key=value, got {f}")))?;
        }
        cfg.merge(&flag_kv)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> AppResult<Self> {
        let mut cfg = Self::defaults();
        cfg.merge(&KvMap::parse(text).map_err(|e| AppError::Usage(e.to_string()))?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn merge(&mut self, other: &KvMap) -> AppResult<()> {
        for (k, _) in other.iter() {
            if !self.kv.contains(k) {
                return Err(AppError::Usage(format!("unknown config key {k}")));
            }
        }
        self.kv.merge(other);
        Ok(())
    }

    /// Sets one known key.
    pub fn set(&mut self, key: &str, value: impl Display) -> AppResult<()> {
        if !self.kv.contains(key) {
            return Err(AppError::Usage(format!("unknown config key {key}")));
        }
        self.kv.set(key, value);
        Ok(())
    }

    /// Copy with `key=value` overrides applied and validated.
    pub fn with(&self, pairs: &[&str]) -> AppResult<Self> {
        let mut kv = KvMap::new();
        for p in pairs {
            kv.insert_pair(p).map_err(|_| AppError::Usage(format!("expected key=value, got {p}")))?;
        }
        let mut out = self.clone();
        out.merge(&kv)?;
        out.validate()?;
        Ok(out)
    }

    /// The resolved configuration in the file format it is read from.
    pub fn echo(&self) -> String {
        format!("# sslab resolved configuration\n{}", self.kv.to_text())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.kv.raw(key).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> AppResult<T> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| AppError::Usage(format!("cannot parse {key}={raw}")))
    }

    /// `None` for an empty value.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn seed(&self) -> AppResult<u64> {
        self.get("seed")
    }

    /// Checks every typed section so a bad value fails before any work starts.
    pub fn validate(&self) -> AppResult<()> {
        self.seed()?;
        self.split_config()?;
        self.encoder()?;
        self.question()?;
        self.head_init()?;
        self.augment()?;
        self.langevin()?;
        self.ebm()?;
        self.ebm_checkpoint_every()?;
        self.contrastive()?;
        self.vqa_train()?;
        self.train_fraction()?;
        self.pretrain_fraction()?;
        self.jem()?;
        self.cebm()?;
        self.eval_split()?;
        self.eval_bins()?;
        self.ood_kinds()?;
        self.ood_n()?;
        self.ood_source()?;
        self.ood_bins()?;
        self.ood_id_split()?;
        self.sample_count()?;
        self.sweep()?;
        Ok(())
    }

    pub fn split_config(&self) -> AppResult<SplitConfig> {
        let c = SplitConfig {
            pretrain: self.get("data.pretrain")?,
            train: self.get("data.train")?,
            validation: self.get("data.validation")?,
            test: self.get("data.test")?,
            pool_per_combo: self.get("data.pool_per_combo")?,
            scale: self.get("data.scale")?,
            seed: self.get("data.seed")?,
            scheme: self.raw("data.scheme").parse::<SplitScheme>()?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn encoder(&self) -> AppResult<EncoderConfig> {
        Ok(EncoderConfig::read_kv(&self.kv, "encoder")?)
    }

    pub fn question(&self) -> AppResult<QuestionEncoderConfig> {
        let c = QuestionEncoderConfig {
            vocab_size: Vocabulary::default().len(),
            embed_dim: self.get("question.embed_dim")?,
            hidden_dim: self.get("question.hidden_dim")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn classifier_hidden(&self) -> AppResult<usize> {
        match self.get("classifier.hidden")? {
            0 => Err(AppError::Usage("classifier.hidden must be positive".into())),
            h => Ok(h),
        }
    }

    pub fn head_init(&self) -> AppResult<HeadInit> {
        self.classifier_hidden()?;
        match self.raw("classifier.init") {
            "kaiming" => Ok(HeadInit::Kaiming),
            "zero" => Ok(HeadInit::Zero),
            v => Err(AppError::Usage(format!("classifier.init must be kaiming or zero, got {v}"))),
        }
    }

    pub fn augment(&self) -> AppResult<AugmentConfig> {
        Ok(AugmentConfig::read_kv(&self.kv, "augment")?)
    }

    pub fn langevin(&self) -> AppResult<LangevinConfig> {
        let noise = match self.raw("langevin.noise") {
            "" => None,
            _ => Some(self.get::<f32>("langevin.noise")?),
        };
        let c = LangevinConfig {
            steps: self.get("langevin.steps")?,
            step_size: self.get("langevin.step_size")?,
            noise_scale: noise,
            clamp: Some((-1.0, 1.0)),
            detach: self.get("langevin.detach")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn ebm(&self) -> AppResult<EbmTrainConfig> {
        let c = EbmTrainConfig {
            epochs: self.get("ebm.epochs")?,
            batch_size: self.get("ebm.batch_size")?,
            lr: self.get("ebm.lr")?,
            alpha: self.get("ebm.alpha")?,
            langevin: self.langevin()?,
            buffer_capacity: self.get("ebm.buffer_capacity")?,
            reinit_prob: self.probability("ebm.reinit_prob")?,
            augment: self.augment()?,
        };
        c.validate()?;
        Ok(c)
    }

    /// Steps between last-good checkpoints during EBM pretraining; 0 keeps
    /// only the per-epoch ones.
    pub fn ebm_checkpoint_every(&self) -> AppResult<usize> {
        self.get("ebm.checkpoint_every")
    }

    fn probability(&self, key: &str) -> AppResult<f64> {
        let p: f64 = self.get(key)?;
        if !(0.0..=1.0).contains(&p) {
            return Err(AppError::Usage(format!("{key} must lie in [0, 1], got {p}")));
        }
        Ok(p)
    }

    pub fn contrastive(&self) -> AppResult<ContrastiveConfig> {
        let c = ContrastiveConfig {
            temperature: self.get("cl.temperature")?,
            batch_size: self.get("cl.batch_size")?,
            epochs: self.get("cl.epochs")?,
            lr: self.get("cl.lr")?,
            projection_hidden: self.get("cl.projection_hidden")?,
            projection_dim: self.get("cl.projection_dim")?,
            augment: self.augment()?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn vqa_train(&self) -> AppResult<VqaTrainConfig> {
        let c = VqaTrainConfig {
            epochs: self.get("train.epochs")?,
            batch_size: self.get("train.batch_size")?,
            lr: self.get("train.lr")?,
            patience: self.get("train.patience")?,
            finetune_encoder: self.get("train.finetune_encoder")?,
        };
        c.validate()?;
        Ok(c)
    }

    /// Fraction of the training split used for fine-tuning.
    pub fn train_fraction(&self) -> AppResult<f64> {
        fraction(self.get("train.fraction")?, "train.fraction")
    }

    /// Fraction of the pretraining split used for pretraining.
    pub fn pretrain_fraction(&self) -> AppResult<f64> {
        fraction(self.get("pretrain.fraction")?, "pretrain.fraction")
    }

    pub fn jem(&self) -> AppResult<JemConfig> {
        let c = JemConfig {
            epochs: self.get("jem.epochs")?,
            batch_size: self.get("jem.batch_size")?,
            lr: self.get("jem.lr")?,
            w: self.get("jem.w")?,
            delta: self.get("jem.delta")?,
            divergence_stop: self.get("jem.divergence_stop")?,
            window: self.get("jem.window")?,
            alpha: self.get("jem.alpha")?,
            patience: self.get("jem.patience")?,
            langevin: self.langevin()?,
            buffer_capacity: self.get("jem.buffer_capacity")?,
            reinit_prob: self.probability("jem.reinit_prob")?,
            augment: if self.get("jem.augment")? {
                self.augment()?
            } else {
                AugmentConfig::identity()
            },
        };
        c.validate()?;
        Ok(c)
    }

    pub fn cebm(&self) -> AppResult<CebmConfig> {
        let c = CebmConfig {
            epochs: self.get("cebm.epochs")?,
            batch_size: self.get("cebm.batch_size")?,
            lr: self.get("cebm.lr")?,
            alpha: self.get("cebm.alpha")?,
            langevin: self.langevin()?,
            buffer_capacity: self.get("cebm.buffer_capacity")?,
            reinit_prob: self.probability("cebm.reinit_prob")?,
            frechet_every: self.get("cebm.frechet_every")?,
            frechet_samples: self.get("cebm.frechet_samples")?,
        };
        c.validate()?;
        Ok(c)
    }

    /// Labelled split scored by `evaluate`.
    pub fn eval_split(&self) -> AppResult<SplitKind> {
        labelled_split(self.raw("eval.split"), "eval.split")
    }

    pub fn eval_bins(&self) -> AppResult<usize> {
        positive(self.get("eval.bins")?, "eval.bins")
    }

    pub fn ood_kinds(&self) -> AppResult<Vec<sslab_core::data::OodKind>> {
        self.raw("ood.kinds")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(AppError::from))
            .collect()
    }

    pub fn ood_n(&self) -> AppResult<usize> {
        positive(self.get("ood.n")?, "ood.n")
    }

    pub fn ood_source(&self) -> AppResult<SourceChoice> {
        match self.raw("ood.source") {
            "auto" => Ok(SourceChoice::Auto),
            s => Ok(SourceChoice::Fixed(s.parse()?)),
        }
    }

    pub fn ood_bins(&self) -> AppResult<usize> {
        positive(self.get("ood.bins")?, "ood.bins")
    }

    pub fn ood_id_split(&self) -> AppResult<SplitKind> {
        let k: SplitKind = self.raw("ood.id_split").parse()?;
        Ok(k)
    }

    /// Images per generated sample grid.
    pub fn sample_count(&self) -> AppResult<usize> {
        self.get("samples.count")
    }

    pub fn sweep(&self) -> AppResult<SweepSpec> {
        let fractions = self
            .raw("sweep.fractions")
            .split(',')
            .map(|s| {
                let f: f64 = s
                    .trim()
                    .parse()
                    .map_err(|_| AppError::Usage(format!("cannot parse sweep.fractions entry {s}")))?;
                fraction(f, "sweep.fractions")
            })
            .collect::<AppResult<Vec<f64>>>()?;
        if fractions.is_empty() {
            return Err(AppError::Usage("sweep.fractions is empty".into()));
        }
        Ok(SweepSpec {
            axis: self.raw("sweep.axis").parse()?,
            fractions,
            seeds: positive(self.get("sweep.seeds")?, "sweep.seeds")?,
            method: self.raw("sweep.method").parse()?,
        })
    }
}

fn fraction(f: f64, key: &str) -> AppResult<f64> {
    if f > 0.0 && f <= 1.0 {
        Ok(f)
    } else {
        Err(AppError::Usage(format!("{key} must lie in (0, 1], got {f}")))
    }
}

fn positive(v: usize, key: &str) -> AppResult<usize> {
    if v == 0 {
        Err(AppError::Usage(format!("{key} must be at least 1")))
    } else {
        Ok(v)
    }
}

fn labelled_split(s: &str, key: &str) -> AppResult<SplitKind> {
    match s.parse::<SplitKind>()? {
        SplitKind::Pretrain => Err(AppError::Usage(format!("{key}: the pretraining split has no answers"))),
        k => Ok(k),
    }
}
