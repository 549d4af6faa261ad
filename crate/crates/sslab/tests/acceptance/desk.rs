//! Criteria 5 to 10: desk-scale experiments through the pipeline functions.
//!
//! Every run gets its own directory with a config echo under
//! `$CARGO_TARGET_TMPDIR/acceptance`, which is wiped at start. Runs shared by
//! several criteria (data, per-seed baseline and CL models) are computed once.

use std::cell::OnceCell;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sslab::config::RunConfig;
use sslab::core::data::SplitKind;
use sslab::core::energy_supervised::{jem_loss, jem_stop_check};
use sslab::core::vqa::{cross_entropy, one_hot};
use sslab::core::{Tape, Tensor};
use sslab::error::AppResult;
use sslab::pipeline::{
    gen_data, run_finetune, run_jem, run_ood, run_pretrain_cl, run_pretrain_ebm, OodOutcome, TrainOutcome,
};
use sslab::runs::{create_run_dir, write_echo};
use sslab::sweep::{run_sweep, SWEEP_CSV, SWEEP_SVG};
use sslab::tables::{read_csv, SweepRow};

use crate::Verdict;

/// Desk-scale model and schedule: 2400 pretraining images, 720 VQA examples.
const DESK: &[&str] = &[
    "data.scale=0.2",
    "encoder.stem_channels=16",
    "encoder.stem_stride=2",
    "encoder.stages=2",
    "encoder.blocks_per_stage=1",
    "encoder.embed_dim=64",
    "train.epochs=30",
    "train.batch_size=32",
    "cl.epochs=60",
    "cl.batch_size=128",
    "augment.hue=0.5",
    "augment.grayscale_p=0.2",
];

/// Short EBM pretraining; enough to separate data from noise.
const EBM: &[&str] = &["ebm.epochs=2", "langevin.steps=20"];

/// JEM sampler: large drift with little noise, so sampled images track the
/// data energy instead of staying noise-like from the first batch.
const JEM: &[&str] = &["jem.epochs=10", "langevin.steps=10", "langevin.step_size=200", "langevin.noise=0.01"];

const SEEDS: [u64; 3] = [0, 1, 2];
const SEED_BUDGET_S: f64 = 30.0 * 60.0;

struct SeedRuns {
    baseline: TrainOutcome,
    baseline_dir: PathBuf,
    cl_checkpoint: PathBuf,
    finetuned: TrainOutcome,
    finetuned_dir: PathBuf,
    seconds: f64,
}

pub struct Desk {
    root: PathBuf,
    base: RunConfig,
    shortcut: OnceCell<PathBuf>,
    sphere: OnceCell<PathBuf>,
    seeds: [OnceCell<SeedRuns>; 3],
}

fn must<T>(what: &str, r: AppResult<T>) -> T {
    r.unwrap_or_else(|e| panic!("{what}: {e}"))
}

fn test_metric(out: &TrainOutcome, f: impl Fn(&sslab::tables::MetricsRow) -> Option<f64>) -> f64 {
    out.split(SplitKind::Test).and_then(f).unwrap_or(f64::NAN)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

impl Desk {
    pub fn new() -> Self {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        let _ = fs::remove_dir_all(&root);
        fs::create_dir_all(&root).expect("acceptance root");
        Self {
            root,
            base: must("desk config", RunConfig::defaults().with(DESK)),
            shortcut: OnceCell::new(),
            sphere: OnceCell::new(),
            seeds: Default::default(),
        }
    }

    /// Runs one pipeline stage in a fresh run directory.
    fn stage<T>(&self, command: &str, cfg: &RunConfig, f: fn(&RunConfig, &Path) -> AppResult<T>) -> (PathBuf, T) {
        let seed = must("seed", cfg.seed());
        let dir = must("run dir", create_run_dir(&self.root, command, seed));
        must("config echo", write_echo(&dir, cfg));
        eprintln!("[acceptance] {command} seed {seed} ...");
        let start = Instant::now();
        let out = must(&format!("{command} seed {seed}"), f(cfg, &dir));
        eprintln!("[acceptance] {command} seed {seed} done in {:.0} s", start.elapsed().as_secs_f64());
        (dir, out)
    }

    fn with(&self, cfg: &RunConfig, pairs: &[String]) -> RunConfig {
        let refs: Vec<&str> = pairs.iter().map(String::as_str).collect();
        must("config override", cfg.with(&refs))
    }

    fn data(&self, scheme: &str) -> &Path {
        let cell = if scheme == "shortcut" { &self.shortcut } else { &self.sphere };
        cell.get_or_init(|| {
            let cfg = self.with(&self.base, &[format!("data.scheme={scheme}")]);
            self.stage("gen-data", &cfg, gen_data).1.dir
        })
    }

    fn on_data(&self, scheme: &str, seed: u64, extra: &[&str]) -> RunConfig {
        let mut pairs = vec![
            format!("data.dir={}", self.data(scheme).display()),
            format!("data.scheme={scheme}"),
            format!("seed={seed}"),
        ];
        pairs.extend(extra.iter().map(|s| s.to_string()));
        self.with(&self.base, &pairs)
    }

    fn seed(&self, i: usize) -> &SeedRuns {
        self.seeds[i].get_or_init(|| {
            let seed = SEEDS[i];
            let cfg = self.on_data("shortcut", seed, &[]);
            let start = Instant::now();
            let (baseline_dir, baseline) = self.stage("finetune", &cfg, run_finetune);
            let (_, cl) = self.stage("pretrain-cl", &cfg, run_pretrain_cl);
            let ft = self.with(&cfg, &[format!("init.checkpoint={}", cl.checkpoint.display())]);
            let (finetuned_dir, finetuned) = self.stage("finetune", &ft, run_finetune);
            SeedRuns {
                baseline,
                baseline_dir,
                cl_checkpoint: cl.checkpoint,
                finetuned,
                finetuned_dir,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
    }

    fn all_seeds(&self) -> Vec<&SeedRuns> {
        (0..SEEDS.len()).map(|i| self.seed(i)).collect()
    }

    pub fn main_result(&self) -> Verdict {
        let runs = self.all_seeds();
        let val: Vec<f64> =
            runs.iter().map(|r| r.baseline.split(SplitKind::Validation).map_or(f64::NAN, |m| m.accuracy)).collect();
        let base: Vec<f64> = runs.iter().map(|r| test_metric(&r.baseline, |m| Some(m.accuracy))).collect();
        let cl: Vec<f64> = runs.iter().map(|r| test_metric(&r.finetuned, |m| Some(m.accuracy))).collect();
        let secs: Vec<f64> = runs.iter().map(|r| r.seconds).collect();
        let overfit = mean(&val) - mean(&base);
        let gain = mean(&cl) - mean(&base);
        let slowest = secs.iter().cloned().fold(0.0, f64::max);
        Verdict::new(
            overfit >= 0.30 && gain >= 0.20 && slowest <= SEED_BUDGET_S,
            format!(
                "baseline val {} test {} (gap {:.3} >= 0.30); CL test {} (gain {:.3} >= 0.20); slowest seed {:.0} s",
                list(&val),
                list(&base),
                overfit,
                list(&cl),
                gain,
                slowest
            ),
        )
    }

    pub fn ood_detection(&self) -> Verdict {
        let finetuned = &self.seed(0).finetuned;
        let ebm_cfg = self.on_data("shortcut", 0, EBM);
        let (_, ebm) = self.stage("pretrain-ebm", &ebm_cfg, run_pretrain_ebm);
        let cfg = self.with(
            &self.on_data("shortcut", 0, &[]),
            &[format!("model.checkpoint={},{}", ebm.checkpoint.display(), finetuned.checkpoint.display())],
        );
        let (_, out): (_, OodOutcome) = self.stage("ood", &cfg, run_ood);
        let row = |suffix: &str| {
            out.summary.rows.iter().find(|(m, _)| m.ends_with(suffix)).map(|(m, _)| m.clone()).expect(suffix)
        };
        let (energy, softmax) = (row("_energy"), row("_max_softmax"));
        let get = |m: &str, s: &str| out.auroc(m, s).unwrap_or(f64::NAN);
        let e = get(&energy, "noise");
        let s = get(&softmax, "noise");
        Verdict::new(
            e >= 0.95 && s >= 0.85,
            format!(
                "noise AUROC: energy {e:.3} (>= 0.95), max-softmax {s:.3} (>= 0.85); \
                 reported only: background {:.3}/{:.3}, cone {:.3}/{:.3}",
                get(&energy, "background"),
                get(&softmax, "background"),
                get(&energy, "cone"),
                get(&softmax, "cone"),
            ),
        )
    }

    pub fn jem(&self) -> Verdict {
        let mechanics = jem_mechanics();
        let mut standard = Vec::new();
        let mut modified = Vec::new();
        for seed in SEEDS {
            for (w, stop, out) in [("1", "false", &mut standard), ("0.1", "true", &mut modified)] {
                let cfg = self.on_data("sphere-anchor", seed, JEM);
                let cfg = self.with(&cfg, &[format!("jem.w={w}"), format!("jem.divergence_stop={stop}")]);
                let (_, res) = self.stage("jem", &cfg, run_jem);
                out.push(test_metric(&res, |m| m.ood_accuracy));
            }
        }
        let at_least = standard.iter().zip(&modified).filter(|(s, m)| m >= s).count();
        let strictly = standard.iter().zip(&modified).filter(|(s, m)| m > s).count();
        let pass = mechanics.is_ok() && at_least >= 2;
        Verdict::new(
            pass,
            format!(
                "mechanics {}; OOD accuracy standard {} vs modified {}: modified >= standard on {at_least}/3 \
                 (strictly greater on {strictly}/3)",
                mechanics.err().unwrap_or_else(|| "ok".into()),
                list(&standard),
                list(&modified)
            ),
        )
    }

    pub fn calibration(&self) -> Verdict {
        let eces: Vec<f64> = self.all_seeds().iter().map(|r| test_metric(&r.baseline, |m| m.ood_ece)).collect();
        let m = mean(&eces);
        Verdict::new(m > 0.4, format!("baseline ECE on unseen test combinations {} (mean {m:.3} > 0.4)", list(&eces)))
    }

    pub fn sweep(&self) -> Verdict {
        let dir = self.root.join("sweep");
        fs::create_dir_all(&dir).expect("sweep dir");
        // Full-data CL checkpoints from the main result use the same config and
        // seed the sweep would pretrain with, so they are seeded into its cache.
        for (i, seed) in SEEDS.iter().enumerate() {
            let cache = dir.join(format!("pretrain-cl-f1-s{seed}"));
            fs::create_dir_all(&cache).expect("cache dir");
            fs::copy(&self.seed(i).cl_checkpoint, cache.join("cl.ssck")).expect("seed cache");
        }
        let cfg = self.on_data("shortcut", SEEDS[0], &["sweep.method=cl", &format!("sweep.seeds={}", SEEDS.len())]);
        must("sweep echo", write_echo(&dir, &cfg));
        eprintln!("[acceptance] sweep ...");
        let start = Instant::now();
        must("sweep", run_sweep(&cfg, &dir));
        eprintln!("[acceptance] sweep done in {:.0} s", start.elapsed().as_secs_f64());

        let rows: Vec<SweepRow> = must("sweep csv", read_csv(&dir.join(SWEEP_CSV)));
        let spec = must("sweep spec", cfg.sweep());
        let complete = rows.len() == spec.fractions.len() * spec.seeds && rows.iter().all(|r| r.test_accuracy.is_finite());
        let svg = fs::read_to_string(dir.join(SWEEP_SVG)).unwrap_or_default();
        let svg_ok = roxmltree::Document::parse(&svg).is_ok_and(|d| d.root_element().tag_name().name() == "svg");
        let at = |f: f64| mean(&rows.iter().filter(|r| r.fraction == f).map(|r| r.test_accuracy).collect::<Vec<_>>());
        let smallest = spec.fractions.iter().cloned().fold(f64::INFINITY, f64::min);
        let largest = spec.fractions.iter().cloned().fold(0.0, f64::max);
        let drop = at(largest) - at(smallest);
        let curve: Vec<String> = spec.fractions.iter().map(|&f| format!("{f}:{:.3}", at(f))).collect();
        Verdict::new(
            complete && svg_ok && drop <= 0.10,
            format!(
                "{} rows, csv {}, svg {}; mean CL test by fraction {}; drop at {smallest} = {drop:.3} (<= 0.10)",
                rows.len(),
                if complete { "complete" } else { "incomplete" },
                if svg_ok { "valid" } else { "invalid" },
                curve.join(" ")
            ),
        )
    }

    pub fn reproducibility(&self) -> Verdict {
        let runs = self.seed(0);
        let mut notes = Vec::new();
        let mut pass = true;
        for (name, dir) in [("baseline", &runs.baseline_dir), ("CL fine-tune", &runs.finetuned_dir)] {
            let echo = must("echo", RunConfig::parse(Some(&dir.join("config.txt")), &[]));
            let (again, _) = self.stage("finetune", &echo, run_finetune);
            let same = fs::read(dir.join("metrics.csv")).ok() == fs::read(again.join("metrics.csv")).ok()
                && fs::read(dir.join("config.txt")).ok() == fs::read(again.join("config.txt")).ok();
            pass &= same;
            notes.push(format!("{name} {}", if same { "identical" } else { "differs" }));
        }
        Verdict::new(pass, format!("re-run from echoed config: {}", notes.join(", ")))
    }
}

/// Loss weighting and the strict stop rule on hand-made inputs.
fn jem_mechanics() -> Result<(), String> {
    let checks = [
        (0.0, 0.9, true),
        (0.0, 0.8, false),
        (-1.0, -0.1, true),
        (0.3, -0.4, false),
    ];
    for (real, fake, want) in checks {
        if jem_stop_check(real, fake, 0.8) != want {
            return Err(format!("stop rule wrong at E_real {real}, E_fake {fake}"));
        }
    }
    let real = Tensor::from_slice(&[2, 3], &[1.0, -0.5, 0.2, 0.0, 2.0, -1.0]).map_err(|e| e.to_string())?;
    let fake = Tensor::from_slice(&[2, 3], &[0.3, 0.1, -0.2, 1.5, 0.0, 0.4]).map_err(|e| e.to_string())?;
    let targets = one_hot::<f64>(&[0, 1], 3).map_err(|e| e.to_string())?;
    for w in [1.0, 0.1] {
        let mut t = Tape::<f64>::new();
        let (r, f) = (t.constant(real.clone()), t.constant(fake.clone()));
        let terms = jem_loss(&mut t, r, f, &targets, w, 0.1).map_err(|e| e.to_string())?;
        let ce = cross_entropy(&mut t, r, &targets).map_err(|e| e.to_string())?;
        let (total, energy, ce) = (t.value(terms.total).data()[0], t.value(terms.energy).data()[0], t.value(ce).data()[0]);
        if (total - (w * ce + energy)).abs() > 1e-12 {
            return Err(format!("loss weight {w}: total {total} != {w}*{ce} + {energy}"));
        }
    }
    Ok(())
}
