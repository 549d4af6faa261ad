//! CSV and JSON report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sslab_core::contrastive::ClStepRecord;
use sslab_core::ebm::EbmStepRecord;
use sslab_core::energy_supervised::EnergyEpochRecord;
use sslab_core::ood::HistogramRow;
use sslab_core::vqa::{CalibrationBin, EpochRecord};

use crate::error::{AppError, AppResult};

/// Writes `rows` with a header derived from the row type.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> AppResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> AppResult<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(AppError::from)).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> AppResult<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| AppError::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EbmRow {
    pub step: usize,
    pub loss: f32,
    #[serde(rename = "mean_E_real")]
    pub mean_e_real: f32,
    #[serde(rename = "mean_E_fake")]
    pub mean_e_fake: f32,
    pub buffer_size: usize,
}

impl EbmRow {
    pub fn new(step: usize, r: &EbmStepRecord) -> Self {
        Self {
            step,
            loss: r.loss,
            mean_e_real: r.mean_e_real,
            mean_e_fake: r.mean_e_fake,
            buffer_size: r.buffer_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClRow {
    pub step: usize,
    pub loss: f32,
    pub mean_pos_score: f32,
    pub mean_neg_score: f32,
}

impl From<&ClStepRecord> for ClRow {
    fn from(r: &ClStepRecord) -> Self {
        Self {
            step: r.step,
            loss: r.loss,
            mean_pos_score: r.mean_pos_score,
            mean_neg_score: r.mean_neg_score,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub epoch: usize,
    pub train_loss: f32,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

impl From<&EpochRecord> for TrainRow {
    fn from(r: &EpochRecord) -> Self {
        Self {
            epoch: r.epoch,
            train_loss: r.train_loss,
            train_accuracy: r.train_accuracy,
            val_accuracy: r.val_accuracy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub epoch: usize,
    pub ce_loss: Option<f32>,
    pub energy_loss: f32,
    #[serde(rename = "mean_E_real")]
    pub mean_e_real: f32,
    #[serde(rename = "mean_E_fake")]
    pub mean_e_fake: f32,
    pub stop_flag: bool,
    pub frechet: Option<f64>,
}

impl From<&EnergyEpochRecord> for EnergyRow {
    fn from(r: &EnergyEpochRecord) -> Self {
        Self {
            epoch: r.epoch,
            ce_loss: r.ce_loss,
            energy_loss: r.energy_loss,
            mean_e_real: r.mean_e_real,
            mean_e_fake: r.mean_e_fake,
            stop_flag: r.stop_flag,
            frechet: r.frechet,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRow {
    pub example_id: usize,
    pub confidence: f64,
    pub correct: bool,
    pub predicted: String,
    pub answer: String,
    pub shape: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

impl From<&CalibrationBin> for CalibrationRow {
    fn from(b: &CalibrationBin) -> Self {
        Self {
            bin_low: b.lo,
            bin_high: b.hi,
            count: b.count,
            accuracy: b.accuracy,
            confidence: b.confidence,
        }
    }
}

/// One evaluated split. `ood_*` columns cover the examples whose
/// shape/color combination never occurs in training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub split: String,
    pub n: usize,
    pub accuracy: f64,
    pub accuracy_sphere: Option<f64>,
    pub accuracy_cube: Option<f64>,
    pub accuracy_cylinder: Option<f64>,
    pub ece: f64,
    pub ood_n: usize,
    pub ood_accuracy: Option<f64>,
    pub ood_ece: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSummary {
    pub count: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

/// JSON form of an evaluation; per-example records go to the confidence CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsJson {
    pub split: String,
    pub seed: u64,
    pub n: usize,
    pub accuracy: f64,
    pub per_shape: BTreeMap<String, ShapeSummary>,
    pub ece: f64,
    pub ood_n: usize,
    pub ood_accuracy: Option<f64>,
    pub ood_ece: Option<f64>,
    pub calibration: Vec<CalibrationRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub example_id: usize,
    pub score: f32,
    pub is_id: bool,
    pub dataset_kind: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramCsvRow {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count_id: usize,
    pub count_ood: usize,
}

impl From<&HistogramRow> for HistogramCsvRow {
    fn from(r: &HistogramRow) -> Self {
        Self {
            bin_low: r.bin_low,
            bin_high: r.bin_high,
            count_id: r.count_id,
            count_ood: r.count_ood,
        }
    }
}

/// AUROC table: one row per model, one column per OOD source.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AurocSummary {
    pub sources: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl AurocSummary {
    pub fn push(&mut self, model: &str, values: &[(String, f64)]) -> AppResult<()> {
        if self.sources.is_empty() && self.rows.is_empty() {
            self.sources = values.iter().map(|(s, _)| s.clone()).collect();
        }
        if values.len() != self.sources.len() || values.iter().zip(&self.sources).any(|((s, _), t)| s != t) {
            return Err(AppError::Format("AUROC rows must share the same OOD sources".into()));
        }
        self.rows.push((model.to_string(), values.iter().map(|(_, v)| *v).collect()));
        Ok(())
    }

    pub fn write(&self, path: &Path) -> AppResult<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["model".to_string()];
        header.extend(self.sources.iter().cloned());
        w.write_record(&header)?;
        for (model, values) in &self.rows {
            let mut rec = vec![model.clone()];
            rec.extend(values.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| AppError::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub seed: u64,
    pub test_accuracy: f64,
    pub val_accuracy: f64,
}
