//! Out-of-distribution scoring and threshold-free evaluation.
//!
//! Scores are oriented so that higher means more in-distribution. Energy
//! scores are `E(x)` under `p(x) ∝ exp(E(x))`; for a classifier this is
//! `logsumexp` of its logits.

use alloc::format;
use alloc::vec::Vec;

use core::cmp::Ordering;
use core::fmt;
use core::str::FromStr;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::ebm::EbmModel;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::vqa::{VqaModel, ANSWERS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScoreSource {
    Energy,
    MaxSoftmax,
}

impl ScoreSource {
    pub fn name(self) -> &'static str {
        match self {
            ScoreSource::Energy => "energy",
            ScoreSource::MaxSoftmax => "max_softmax",
        }
    }
}

impl fmt::Display for ScoreSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "energy" => Ok(ScoreSource::Energy),
            "max_softmax" => Ok(ScoreSource::MaxSoftmax),
            _ => Err(Error::Invalid(format!("unknown score source {s}"))),
        }
    }
}

/// A model that can be scored.
#[derive(Clone, Copy, Debug)]
pub enum Scorer<'a> {
    /// Unconditional energy model; only the energy source applies.
    Ebm(&'a EbmModel),
    /// Question-answering classifier; needs one question per image.
    Vqa(&'a VqaModel, &'a [Vec<usize>]),
}

/// Largest softmax probability of each row.
pub fn max_softmax(logits: &Tensor) -> Vec<f32> {
    let a = logits.shape().get(1).copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(a)
        .map(|row| {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let s: f32 = row.iter().map(|&v| (v - m).exp()).sum();
            1.0 / s
        })
        .collect()
}

/// Row-wise `logsumexp`, the classifier's log-density score.
pub fn logit_energy(logits: &Tensor) -> Vec<f32> {
    let a = logits.shape().get(1).copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(a)
        .map(|row| {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            m + row.iter().map(|&v| (v - m).exp()).sum::<f32>().ln()
        })
        .collect()
}

/// Scores every image, higher meaning more in-distribution.
pub fn ood_scores(scorer: Scorer<'_>, store: &ParamStore, images: &Tensor, source: ScoreSource) -> Result<Vec<f32>> {
    let scores = match (scorer, source) {
        (Scorer::Ebm(m), ScoreSource::Energy) => m.energies(store, images)?,
        (Scorer::Ebm(_), ScoreSource::MaxSoftmax) => {
            return Err(Error::Invalid("max_softmax needs a classifier, not an energy model".into()))
        }
        (Scorer::Vqa(m, q), s) => {
            let logits = m.answer_scores(store, images, q)?;
            debug_assert_eq!(logits.shape()[1], ANSWERS);
            match s {
                ScoreSource::Energy => logit_energy(&logits),
                ScoreSource::MaxSoftmax => max_softmax(&logits),
            }
        }
    };
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ood score".into()));
    }
    Ok(scores)
}

fn check_scores(id: &[f32], ood: &[f32]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Invalid("auroc needs non-empty id and ood scores".into()));
    }
    if id.iter().chain(ood).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("auroc input".into()));
    }
    Ok(())
}

/// Mann-Whitney AUROC: `P(id > ood) + 0.5 P(id = ood)`, via sorting.
pub fn auroc(id: &[f32], ood: &[f32]) -> Result<f64> {
    check_scores(id, ood)?;
    let mut all: Vec<(f32, bool)> = id.iter().map(|&v| (v, true)).chain(ood.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    // Count, for each tie group, ood entries strictly below and ood ties.
    let mut credit = 0.0f64;
    let mut ood_below = 0usize;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut n_id, mut n_ood) = (0usize, 0usize);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                n_id += 1;
            } else {
                n_ood += 1;
            }
            j += 1;
        }
        credit += n_id as f64 * (ood_below as f64 + 0.5 * n_ood as f64);
        ood_below += n_ood;
        i = j;
    }
    Ok(credit / (id.len() as f64 * ood.len() as f64))
}

/// Direct enumeration of all id/ood pairs.
pub fn auroc_pairs(id: &[f32], ood: &[f32]) -> Result<f64> {
    check_scores(id, ood)?;
    let mut credit = 0.0f64;
    for &a in id {
        for &b in ood {
            credit += match a.partial_cmp(&b) {
                Some(Ordering::Greater) => 1.0,
                Some(Ordering::Equal) => 0.5,
                _ => 0.0,
            };
        }
    }
    Ok(credit / (id.len() as f64 * ood.len() as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramRow {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count_id: usize,
    pub count_ood: usize,
}

/// Equal-width histogram over `range`; values outside it land in the edge
/// bins. Also returns how many values were clamped.
pub fn histogram(id: &[f32], ood: &[f32], bins: usize, range: (f64, f64)) -> Result<(Vec<HistogramRow>, usize)> {
    let (lo, hi) = range;
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Invalid(format!("degenerate histogram range [{lo}, {hi}]")));
    }
    let width = (hi - lo) / bins as f64;
    let mut rows: Vec<HistogramRow> = (0..bins)
        .map(|b| HistogramRow {
            bin_low: lo + b as f64 * width,
            bin_high: if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width },
            count_id: 0,
            count_ood: 0,
        })
        .collect();
    let mut clamped = 0;
    for (values, is_id) in [(id, true), (ood, false)] {
        for &v in values {
            let v = v as f64;
            if !(lo..=hi).contains(&v) {
                clamped += 1;
            }
            let b = if v.is_nan() { 0 } else { (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1) };
            if is_id {
                rows[b].count_id += 1;
            } else {
                rows[b].count_ood += 1;
            }
        }
    }
    if clamped > 0 {
        log::info!("histogram clamped {clamped} out-of-range scores into edge bins");
    }
    Ok((rows, clamped))
}

/// Range spanning both score lists, widened slightly if degenerate.
pub fn score_range(id: &[f32], ood: &[f32]) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in id.iter().chain(ood) {
        lo = lo.min(v as f64);
        hi = hi.max(v as f64);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}
