//! Data-ablation sweeps: train and evaluate at every (fraction, seed) point,
//! then aggregate into `sweep.csv` and `sweep.svg`.

use std::path::{Path, PathBuf};

use crate::config::{Pretraining, RunConfig, SweepAxis, SweepSpec};
use crate::error::{AppError, AppResult};
use crate::pipeline::{run_finetune, run_pretrain_cl, run_pretrain_ebm};
use crate::svg::{mean_std, Chart, ChartPoint, Series};
use crate::tables::{read_csv, write_csv, SweepRow};

pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_SVG: &str = "sweep.svg";

/// Validation and test accuracy of one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointResult {
    pub test_accuracy: f64,
    pub val_accuracy: f64,
}

fn point_name(fraction: f64, seed: u64) -> String {
    format!("f{fraction}-s{seed}")
}

fn same_point(r: &SweepRow, fraction: f64, seed: u64) -> bool {
    r.fraction == fraction && r.seed == seed
}

fn is_complete(r: &SweepRow) -> bool {
    r.test_accuracy.is_finite() && r.val_accuracy.is_finite()
}

/// Points in sweep order: fractions as listed, seeds `seed, seed+1, ...`.
pub fn sweep_points(spec: &SweepSpec, base_seed: u64) -> Vec<(f64, u64)> {
    spec.fractions
        .iter()
        .flat_map(|&f| (0..spec.seeds as u64).map(move |k| (f, base_seed + k)))
        .collect()
}

/// Runs every point not already complete in `dir/sweep.csv`. A failing point
/// is logged and recorded as a NaN row; rerunning the sweep in the same
/// directory retries exactly those rows.
pub fn run_sweep_with<F>(cfg: &RunConfig, dir: &Path, mut point: F) -> AppResult<Vec<SweepRow>>
where
    F: FnMut(&RunConfig, &Path) -> AppResult<PointResult>,
{
    let spec = cfg.sweep()?;
    let csv = dir.join(SWEEP_CSV);
    let previous: Vec<SweepRow> = if csv.exists() { read_csv(&csv)? } else { Vec::new() };
    let key = match spec.axis {
        SweepAxis::FinetuneSize => "train.fraction",
        SweepAxis::PretrainSize => "pretrain.fraction",
    };
    let points = sweep_points(&spec, cfg.seed()?);
    let mut rows: Vec<SweepRow> = Vec::with_capacity(points.len());
    for (i, &(fraction, seed)) in points.iter().enumerate() {
        if let Some(done) = previous.iter().find(|r| same_point(r, fraction, seed) && is_complete(r)) {
            rows.push(done.clone());
            continue;
        }
        log::info!("sweep point {}/{}: {key}={fraction} seed={seed}", i + 1, points.len());
        let pdir = dir.join(point_name(fraction, seed));
        let result = std::fs::create_dir_all(&pdir)
            .map_err(|e| AppError::io(&pdir, e))
            .and_then(|_| cfg.with(&[&format!("{key}={fraction}"), &format!("seed={seed}")]))
            .and_then(|pcfg| {
                crate::runs::write_echo(&pdir, &pcfg)?;
                point(&pcfg, &pdir)
            });
        let row = match result {
            Ok(r) => SweepRow {
                fraction,
                seed,
                test_accuracy: r.test_accuracy,
                val_accuracy: r.val_accuracy,
            },
            Err(e) => {
                log::warn!("sweep point {key}={fraction} seed={seed} failed: {e}");
                SweepRow {
                    fraction,
                    seed,
                    test_accuracy: f64::NAN,
                    val_accuracy: f64::NAN,
                }
            }
        };
        rows.push(row);
        // Completed points plus untouched earlier rows stay on disk.
        let mut snapshot = rows.clone();
        snapshot.extend(
            previous
                .iter()
                .filter(|r| !rows.iter().any(|q| same_point(q, r.fraction, r.seed)))
                .cloned(),
        );
        write_csv(&csv, &snapshot)?;
    }
    write_csv(&csv, &rows)?;
    sweep_chart(&spec, &rows)?.write(&dir.join(SWEEP_SVG))?;
    Ok(rows)
}

/// Mean ± std of test and validation accuracy per fraction.
pub fn sweep_chart(spec: &SweepSpec, rows: &[SweepRow]) -> AppResult<Chart> {
    let mut fractions: Vec<f64> = rows.iter().map(|r| r.fraction).collect();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();
    let series = |name: &str, pick: fn(&SweepRow) -> f64| Series {
        name: name.to_string(),
        points: fractions
            .iter()
            .map(|&f| {
                let v: Vec<f64> = rows.iter().filter(|r| r.fraction == f).map(pick).collect();
                let (mean, std) = mean_std(&v);
                ChartPoint { x: f, mean, std }
            })
            .collect(),
    };
    let method = spec.method.name();
    Ok(Chart {
        title: format!("{method}: accuracy vs {} fraction", axis_word(spec.axis)),
        x_label: format!("{} fraction", axis_word(spec.axis)),
        y_label: "accuracy".into(),
        log_x: true,
        series: vec![
            series(&format!("{method} test"), |r| r.test_accuracy),
            series(&format!("{method} val"), |r| r.val_accuracy),
        ],
    })
}

fn axis_word(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::FinetuneSize => "fine-tune",
        SweepAxis::PretrainSize => "pretraining",
    }
}

/// Pretrained checkpoint for a point, reusing one already in `dir`.
fn pretrained(cfg: &RunConfig, dir: &Path, method: Pretraining, axis: SweepAxis) -> AppResult<Option<PathBuf>> {
    if method == Pretraining::None {
        return Ok(None);
    }
    if axis == SweepAxis::FinetuneSize {
        if let Some(p) = cfg.path("init.checkpoint") {
            return Ok(Some(p));
        }
    }
    let fraction = cfg.pretrain_fraction()?;
    let seed = cfg.seed()?;
    let pdir = dir.join(format!("pretrain-{}-f{fraction}-s{seed}", method.name()));
    let file = pdir.join(format!("{}.ssck", method.name()));
    if file.exists() {
        return Ok(Some(file));
    }
    std::fs::create_dir_all(&pdir).map_err(|e| AppError::io(&pdir, e))?;
    let pcfg = cfg.with(&["init.checkpoint="])?;
    crate::runs::write_echo(&pdir, &pcfg)?;
    let out = match method {
        Pretraining::Cl => run_pretrain_cl(&pcfg, &pdir)?,
        Pretraining::Ebm => run_pretrain_ebm(&pcfg, &pdir)?,
        Pretraining::None => unreachable!(),
    };
    Ok(Some(out.checkpoint))
}

/// The standard sweep: (optionally) pretrain, fine-tune, evaluate.
pub fn run_sweep(cfg: &RunConfig, dir: &Path) -> AppResult<Vec<SweepRow>> {
    let spec = cfg.sweep()?;
    if spec.axis == SweepAxis::PretrainSize && spec.method == Pretraining::None {
        return Err(AppError::Usage("a pretrain_size sweep needs sweep.method=cl or ebm".into()));
    }
    run_sweep_with(cfg, dir, |pcfg, pdir| {
        let init = pretrained(pcfg, dir, spec.method, spec.axis)?;
        let init = init.map(|p| p.display().to_string()).unwrap_or_default();
        let ft_cfg = pcfg.with(&[&format!("init.checkpoint={init}")])?;
        let out = run_finetune(&ft_cfg, pdir)?;
        let acc = |k| out.split(k).map(|r| r.accuracy).ok_or_else(|| AppError::Format("missing split metrics".into()));
        Ok(PointResult {
            test_accuracy: acc(sslab_core::data::SplitKind::Test)?,
            val_accuracy: acc(sslab_core::data::SplitKind::Validation)?,
        })
    })
}
