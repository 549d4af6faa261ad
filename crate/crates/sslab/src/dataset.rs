//! On-disk datasets: one PPM per example plus a JSON-lines manifest per split.
//!
//! Layout under a dataset directory:
//! `dataset.json`, `<split>.jsonl` and `<split>/<index>.ppm`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sslab_core::data::{
    center_crop_resize, generate_split, Color, Example, Image, Light, Material, SceneSpec, Shape, Split,
    SplitConfig, SplitKind, Vocabulary, IMAGE_SIZE, RENDERER_VERSION,
};
use sslab_core::vqa::QaSet;
use sslab_core::Tensor;

use crate::error::{AppError, AppResult};
use crate::ppm::{read_ppm, write_ppm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightRecord {
    pub direction: [f32; 3],
    pub intensity: f32,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: usize,
    /// Image path relative to the dataset directory.
    pub image: String,
    pub shape: String,
    pub color: String,
    pub size: f32,
    pub position: [f32; 2],
    pub material: String,
    pub light: LightRecord,
    pub seed: u64,
    pub question: Option<String>,
    pub answer: Option<String>,
    pub split: String,
}

impl ManifestRecord {
    fn from_example(e: &Example, kind: SplitKind) -> Self {
        let s = &e.spec;
        Self {
            index: e.index,
            image: format!("{}/{:05}.ppm", kind.name(), e.index),
            shape: s.shape.map_or_else(|| "none".to_string(), |v| v.name().to_string()),
            color: s.color.name().to_string(),
            size: s.size,
            position: s.position,
            material: s.material.name().to_string(),
            light: LightRecord {
                direction: s.light.direction,
                intensity: s.light.intensity,
            },
            seed: s.seed,
            question: e.qa.as_ref().map(|q| q.question.clone()),
            answer: e.qa.as_ref().map(|q| q.answer.name().to_string()),
            split: kind.name().to_string(),
        }
    }

    /// Reconstructs the scene description.
    pub fn spec(&self) -> AppResult<SceneSpec> {
        let shape = match self.shape.as_str() {
            "none" => None,
            s => Some(s.parse::<Shape>()?),
        };
        Ok(SceneSpec {
            shape,
            color: self.color.parse::<Color>()?,
            size: self.size,
            position: self.position,
            material: self.material.parse::<Material>()?,
            light: Light {
                direction: self.light.direction,
                intensity: self.light.intensity,
            },
            seed: self.seed,
        })
    }
}

/// Dataset-level metadata written next to the manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub seed: u64,
    pub scale: f64,
    pub scheme: String,
    pub renderer_version: String,
    pub counts: BTreeMap<String, usize>,
}

fn manifest_path(dir: &Path, kind: SplitKind) -> PathBuf {
    dir.join(format!("{}.jsonl", kind.name()))
}

fn write_split(dir: &Path, split: &Split) -> AppResult<()> {
    let img_dir = dir.join(split.kind.name());
    fs::create_dir_all(&img_dir).map_err(|e| AppError::io(&img_dir, e))?;
    let path = manifest_path(dir, split.kind);
    let file = fs::File::create(&path).map_err(|e| AppError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for e in &split.examples {
        let rec = ManifestRecord::from_example(e, split.kind);
        write_ppm(&dir.join(&rec.image), &e.render())?;
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| AppError::io(&path, e))?;
    }
    w.flush().map_err(|e| AppError::io(&path, e))
}

/// Renders every split of `cfg` into `dir`.
pub fn write_dataset(dir: &Path, cfg: &SplitConfig) -> AppResult<DatasetInfo> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    let mut counts = BTreeMap::new();
    for kind in SplitKind::ALL {
        let split = generate_split(cfg, kind)?;
        counts.insert(kind.name().to_string(), split.examples.len());
        write_split(dir, &split)?;
        log::info!("wrote {} {} examples", split.examples.len(), kind);
    }
    let info = DatasetInfo {
        seed: cfg.seed,
        scale: cfg.scale,
        scheme: cfg.scheme.name().to_string(),
        renderer_version: RENDERER_VERSION.to_string(),
        counts,
    };
    let path = dir.join("dataset.json");
    let text = serde_json::to_string_pretty(&info)? + "\n";
    fs::write(&path, text).map_err(|e| AppError::io(&path, e))?;
    Ok(info)
}

pub fn read_info(dir: &Path) -> AppResult<DatasetInfo> {
    let path = dir.join("dataset.json");
    let text = fs::read_to_string(&path)
        .map_err(|_| AppError::Missing(format!("no dataset metadata at {}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_manifest(dir: &Path, kind: SplitKind) -> AppResult<Vec<ManifestRecord>> {
    let path = manifest_path(dir, kind);
    let file = fs::File::open(&path)
        .map_err(|_| AppError::Missing(format!("no {kind} manifest at {}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| AppError::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| AppError::Format(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_images(dir: &Path, records: &[ManifestRecord]) -> AppResult<Tensor> {
    let images = records
        .iter()
        .map(|r| read_ppm(&dir.join(&r.image)))
        .collect::<AppResult<Vec<_>>>()?;
    let refs: Vec<&Image> = images.iter().collect();
    Ok(Image::batch_tensor(&refs)?)
}

/// Images of a split as a `[N, 3, 64, 64]` tensor.
pub fn load_split_images(dir: &Path, kind: SplitKind) -> AppResult<Tensor> {
    load_images(dir, &read_manifest(dir, kind)?)
}

/// Images, tokenized questions and answers of a labelled split.
pub fn load_qa(dir: &Path, kind: SplitKind) -> AppResult<QaSet> {
    let records = read_manifest(dir, kind)?;
    let vocab = Vocabulary::default();
    let mut questions = Vec::with_capacity(records.len());
    let mut answers = Vec::with_capacity(records.len());
    for r in &records {
        let (q, a) = match (&r.question, &r.answer) {
            (Some(q), Some(a)) => (q, a),
            _ => return Err(AppError::Format(format!("{kind} example {} has no question", r.index))),
        };
        let a = a
            .parse::<Shape>()?
            .answer_index()
            .ok_or_else(|| AppError::Format(format!("answer {a} is not in the answer set")))?;
        questions.push(vocab.encode(q));
        answers.push(a);
    }
    Ok(QaSet {
        images: load_images(dir, &records)?,
        questions,
        answers,
        ids: records.iter().map(|r| r.index).collect(),
    })
}

/// Per-example shape labels (`sphere`, `cube`, ...) in manifest order.
pub fn shapes(dir: &Path, kind: SplitKind) -> AppResult<Vec<String>> {
    Ok(read_manifest(dir, kind)?.into_iter().map(|r| r.shape).collect())
}

/// Reads every P6/P5 file of a directory, center-cropped and resized to the
/// model input size. Unreadable files are skipped with a warning.
pub fn ingest_external_images(dir: &Path) -> AppResult<Vec<Image>> {
    let entries = fs::read_dir(dir).map_err(|_| AppError::Missing(format!("no image directory {}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        match read_ppm(&p).and_then(|img| Ok(center_crop_resize(&img, IMAGE_SIZE)?)) {
            Ok(img) => out.push(img),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if out.is_empty() {
        return Err(AppError::Format(format!("no usable images in {}", dir.display())));
    }
    Ok(out)
}
