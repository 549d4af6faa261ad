//! Criteria 1 to 4: gradient checks, closed-form oracles, Langevin
//! stationarity and dataset properties.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sslab::core::contrastive::nt_xent_loss;
use sslab::core::data::{
    combo_set, generate_splits, Color, ComboSet, Shape, SplitConfig, SplitKind, SplitScheme, Vocabulary,
};
use sslab::core::ebm::{ebm_loss, sample_chain, LangevinConfig};
use sslab::core::energy_supervised::{frechet_distance, jem_energy, jem_loss, FrechetStats};
use sslab::core::gradcheck::{gradient_check, param_gradient_check};
use sslab::core::nn::{
    ClassifierHead, EncoderConfig, EnergyHead, HeadInit, ImageEncoder, ProjectionHead, QuestionEncoder,
    QuestionEncoderConfig,
};
use sslab::core::ood::{auroc, auroc_pairs};
use sslab::core::vqa::{cross_entropy, ece, one_hot, VqaModel};
use sslab::core::{ParamStore, Result, Tape, Tensor, Var};
use sslab::dataset::write_dataset;

use crate::Verdict;

const INSTANCES: u64 = 20;
const GRAD_TOL: f64 = 1e-3;
const EPS: f64 = 1e-6;
/// Hidden width of ReLU heads. Narrower heads can have every unit dead, which
/// makes gradients exactly zero and leaves only rounding noise to compare.
const HIDDEN: usize = 16;
/// Central-difference step for the deep compositions: small gradients there
/// (~1e-7) need rounding noise (~ulp(f) / step) well below 1e-3 of their size.
const COMPOSITION_EPS: f64 = 1e-5;

type Gen = fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>;
type Op = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(0.2..2.0))
}

/// Scalarises an output with a fixed random direction.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = t.constant(randn(&mut rng, t.shape(y)));
    let p = t.mul(y, r)?;
    t.sum(p)
}

fn primitives() -> Vec<(&'static str, Gen, Op)> {
    vec![
        ("add", |r| vec![randn(r, &[3, 4]), randn(r, &[4])], |t, x| t.add(x[0], x[1])),
        ("sub", |r| vec![randn(r, &[2, 3, 1]), randn(r, &[1, 1, 5])], |t, x| t.sub(x[0], x[1])),
        ("mul", |r| vec![randn(r, &[2, 3, 4]), randn(r, &[3, 1])], |t, x| t.mul(x[0], x[1])),
        ("div", |r| vec![randn(r, &[3, 4]), positive(r, &[1, 4])], |t, x| t.div(x[0], x[1])),
        ("scale", |r| vec![randn(r, &[5])], |t, x| t.scale(x[0], -1.7)),
        ("add_scalar", |r| vec![randn(r, &[5])], |t, x| t.add_scalar(x[0], 0.3)),
        ("neg", |r| vec![randn(r, &[5])], |t, x| t.neg(x[0])),
        ("square", |r| vec![randn(r, &[5])], |t, x| t.square(x[0])),
        ("relu", |r| vec![randn(r, &[4, 5])], |t, x| t.relu(x[0])),
        ("leaky_relu", |r| vec![randn(r, &[4, 5])], |t, x| t.leaky_relu(x[0], 0.2)),
        ("exp", |r| vec![randn(r, &[6])], |t, x| t.exp(x[0])),
        ("log", |r| vec![positive(r, &[6])], |t, x| t.log(x[0])),
        ("tanh", |r| vec![randn(r, &[6])], |t, x| t.tanh(x[0])),
        ("sigmoid", |r| vec![randn(r, &[6])], |t, x| t.sigmoid(x[0])),
        ("clamp", |r| vec![randn(r, &[8])], |t, x| t.clamp(x[0], -0.5, 0.5)),
        ("sum", |r| vec![randn(r, &[3, 4])], |t, x| t.sum(x[0])),
        ("mean", |r| vec![randn(r, &[3, 4])], |t, x| t.mean(x[0])),
        ("sum_axis", |r| vec![randn(r, &[2, 3, 4])], |t, x| t.sum_axis(x[0], 1)),
        ("mean_axis", |r| vec![randn(r, &[2, 3, 4])], |t, x| t.mean_axis(x[0], 2)),
        ("logsumexp", |r| vec![randn(r, &[3, 5])], |t, x| t.logsumexp(x[0], 1)),
        ("softmax", |r| vec![randn(r, &[3, 5])], |t, x| t.softmax(x[0], 1)),
        ("log_softmax", |r| vec![randn(r, &[3, 5])], |t, x| t.log_softmax(x[0], 1)),
        ("l2_normalize", |r| vec![randn(r, &[3, 5])], |t, x| t.l2_normalize(x[0], 1)),
        ("matmul", |r| vec![randn(r, &[3, 4]), randn(r, &[4, 2])], |t, x| t.matmul(x[0], x[1])),
        ("transpose", |r| vec![randn(r, &[3, 4])], |t, x| t.transpose(x[0])),
        ("reshape", |r| vec![randn(r, &[3, 4])], |t, x| t.reshape(x[0], &[2, 6])),
        ("concat", |r| vec![randn(r, &[2, 3]), randn(r, &[2, 2])], |t, x| t.concat(&[x[0], x[1]], 1)),
        ("slice", |r| vec![randn(r, &[3, 5])], |t, x| t.slice(x[0], 1, 1, 4)),
        ("embedding", |r| vec![randn(r, &[5, 3])], |t, x| t.embedding(x[0], &[4, 0, 4, 2])),
        (
            "conv2d",
            |r| vec![randn(r, &[2, 2, 5, 5]), randn(r, &[2, 2, 3, 3])],
            |t, x| t.conv2d(x[0], x[1], 2, 1),
        ),
        ("avg_pool2d", |r| vec![randn(r, &[2, 2, 4, 4])], |t, x| t.avg_pool2d(x[0], 2)),
        (
            "group_norm",
            |r| vec![randn(r, &[2, 4, 3, 3]), positive(r, &[4]), randn(r, &[4])],
            |t, x| t.group_norm(x[0], x[1], x[2], 2),
        ),
    ]
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        input_size: 8,
        in_channels: 3,
        stem_channels: 4,
        stem_stride: 1,
        stages: 2,
        blocks_per_stage: 1,
        embed_dim: 6,
        norm_groups: 2,
        slope: 0.2,
    }
}

fn tiny_question() -> QuestionEncoderConfig {
    QuestionEncoderConfig {
        vocab_size: 12,
        embed_dim: 4,
        hidden_dim: 5,
    }
}

fn images(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n, 3, 8, 8], |_| rng.random_range(-1.0..1.0))
}

/// Worst relative error of one named composition over all instances.
fn compositions(inst: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5000 + inst);
    let mut out = Vec::new();
    let mut check = |name, r: Result<f64>| out.push((name, r.unwrap_or(f64::INFINITY)));

    // Encoder and energy head, gradient with respect to pixels.
    let mut store = ParamStore::new();
    let enc = ImageEncoder::new(&mut store, "enc", &tiny_encoder(), &mut rng).unwrap();
    let head = EnergyHead::new(&mut store, "energy", 6, HeadInit::Kaiming, &mut rng);
    let store64 = store.cast::<f64>();
    let x = images(&mut rng, 2);
    check(
        "encoder+energy (pixels)",
        gradient_check(
            |t, xs| {
                t.bind(&store64, false);
                let e = enc.forward(t, xs[0])?;
                let e = head.forward(t, e)?;
                t.sum(e)
            },
            &[x.clone()],
            COMPOSITION_EPS,
        ),
    );

    // Contrastive divergence loss through the encoder, parameter gradients.
    let fake = images(&mut rng, 2);
    check(
        "encoder+ebm_loss (params)",
        param_gradient_check(
            &store64,
            |t| {
                let (xr, xf) = (t.constant(x.clone()), t.constant(fake.clone()));
                let er = enc.forward(t, xr)?;
                let er = head.forward(t, er)?;
                let ef = enc.forward(t, xf)?;
                let ef = head.forward(t, ef)?;
                ebm_loss(t, er, ef, 0.1)
            },
            COMPOSITION_EPS,
        ),
    );

    // NT-Xent through encoder and projection head.
    let mut store = ParamStore::new();
    let enc = ImageEncoder::new(&mut store, "enc", &tiny_encoder(), &mut rng).unwrap();
    let proj = ProjectionHead::new(&mut store, "proj", 6, HIDDEN, 4, &mut rng);
    let store64 = store.cast::<f64>();
    let views = images(&mut rng, 4);
    check(
        "encoder+nt_xent (params)",
        param_gradient_check(
            &store64,
            |t| {
                let v = t.constant(views.clone());
                let h = enc.forward(t, v)?;
                let z = proj.forward(t, h)?;
                nt_xent_loss(t, z, &[1, 0, 3, 2], 0.5)
            },
            COMPOSITION_EPS,
        ),
    );

    // Full question-answering model with cross-entropy and the JEM loss.
    let mut store = ParamStore::new();
    let model = VqaModel::new(&mut store, &tiny_encoder(), &tiny_question(), HIDDEN, HeadInit::Kaiming, &mut rng).unwrap();
    let store64 = store.cast::<f64>();
    let qs = vec![vec![2, 3, 4], vec![5, 6, 7, 8]];
    let target: Tensor<f64> = one_hot(&[0, 2], 3).unwrap();
    let (xr, xf) = (images(&mut rng, 2), images(&mut rng, 2));
    check(
        "vqa+cross_entropy (params)",
        param_gradient_check(
            &store64,
            |t| {
                let v = t.constant(xr.clone());
                let l = model.logits(t, v, &qs)?;
                cross_entropy(t, l, &target)
            },
            COMPOSITION_EPS,
        ),
    );
    check(
        "vqa+jem_loss (params)",
        param_gradient_check(
            &store64,
            |t| {
                let (a, b) = (t.constant(xr.clone()), t.constant(xf.clone()));
                let lr = model.logits(t, a, &qs)?;
                let lf = model.logits(t, b, &qs)?;
                Ok(jem_loss(t, lr, lf, &target, 0.1, 0.1)?.total)
            },
            COMPOSITION_EPS,
        ),
    );

    // Question encoder alone.
    let mut store = ParamStore::new();
    let q = QuestionEncoder::new(&mut store, "q", &tiny_question(), &mut rng).unwrap();
    let cls = ClassifierHead::new(&mut store, "cls", 5, HIDDEN, 3, HeadInit::Kaiming, &mut rng);
    let store64 = store.cast::<f64>();
    check(
        "question encoder+classifier (params)",
        param_gradient_check(
            &store64,
            |t| {
                let h = q.forward(t, &qs)?;
                let l = cls.forward(t, h)?;
                cross_entropy(t, l, &target)
            },
            COMPOSITION_EPS,
        ),
    );
    out
}

pub fn gradients() -> Verdict {
    let mut worst: Vec<(String, f64)> = Vec::new();
    for (name, gen, op) in primitives() {
        let mut w = 0.0f64;
        for inst in 0..INSTANCES {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + inst);
            let inputs = gen(&mut rng);
            let err = gradient_check(
                |t, xs| {
                    let y = op(t, xs)?;
                    project(t, y, 77 + inst)
                },
                &inputs,
                EPS,
            )
            .unwrap_or(f64::INFINITY);
            w = w.max(err);
        }
        worst.push((name.to_string(), w));
    }
    let mut comp: Vec<(String, f64)> = Vec::new();
    for inst in 0..INSTANCES {
        for (k, (name, err)) in compositions(inst).into_iter().enumerate() {
            if inst == 0 {
                comp.push((name.to_string(), err));
            } else {
                comp[k].1 = comp[k].1.max(err);
            }
        }
    }
    worst.extend(comp);
    let (name, max) = worst.iter().fold(("", 0.0f64), |acc, (n, e)| if *e > acc.1 { (n, *e) } else { acc });
    let failing: Vec<&str> = worst.iter().filter(|(_, e)| !(*e < GRAD_TOL)).map(|(n, _)| n.as_str()).collect();
    Verdict::new(
        failing.is_empty(),
        format!(
            "{} checks x {INSTANCES} instances at f64; worst {name} {max:.2e}{}",
            worst.len(),
            if failing.is_empty() { String::new() } else { format!("; failing: {}", failing.join(", ")) }
        ),
    )
}

fn nt_xent_brute(z: &[Vec<f64>], pairs: &[usize], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb * tau)
    };
    let mut total = 0.0;
    for a in 0..z.len() {
        let denom: f64 = (0..z.len()).filter(|&k| k != a).map(|k| cos(&z[a], &z[k]).exp()).sum();
        total += -(cos(&z[a], &z[pairs[a]]).exp() / denom).ln();
    }
    total / z.len() as f64
}

fn scalar_of(f: impl FnOnce(&mut Tape<f64>) -> Result<Var>) -> f64 {
    let mut t = Tape::new();
    let v = f(&mut t).unwrap();
    t.value(v).data()[0]
}

pub fn closed_forms() -> Verdict {
    const TOL: f64 = 1e-5;
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(31);

    let mut w = 0.0f64;
    for _ in 0..200 {
        let n = 2 * rng.random_range(1..=2usize);
        let d = rng.random_range(2..=5usize);
        let z: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let pairs: Vec<usize> = (0..n).map(|i| i ^ 1).collect();
        let tau = rng.random_range(0.1..1.0);
        let flat = z.concat();
        let got = scalar_of(|t| {
            let v = t.constant(Tensor::from_slice(&[n, d], &flat)?);
            nt_xent_loss(t, v, &pairs, tau)
        });
        w = w.max((got - nt_xent_brute(&z, &pairs, tau)).abs());
    }
    worst.push(("nt_xent", w));

    let mut w = 0.0f64;
    for _ in 0..200 {
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f32> {
            let n = rng.random_range(1..=50usize);
            // Coarse grid so ties occur.
            (0..n).map(|_| rng.random_range(0..8) as f32 / 4.0).collect()
        };
        let (id, ood) = (draw(&mut rng), draw(&mut rng));
        w = w.max((auroc(&id, &ood).unwrap() - auroc_pairs(&id, &ood).unwrap()).abs());
    }
    worst.push(("auroc", w));

    let e = ece(&[0.9, 0.8, 0.3, 0.2], &[true, false, true, true], 2).unwrap();
    worst.push(("ece", (e - 0.55).abs()));

    let lse = |v: &[f64]| {
        scalar_of(|t| {
            let x = t.constant(Tensor::from_slice(&[v.len()], v)?);
            t.logsumexp(x, 0)
        })
    };
    let expected = 3.0 + (1.0 + (-1.0f64).exp() + (-2.0f64).exp()).ln();
    let w = (lse(&[1.0, 2.0, 3.0]) - expected).abs().max((lse(&[0.0, 0.0]) - 2f64.ln()).abs());
    worst.push(("logsumexp", w));

    let energy = |v: &[f64]| {
        scalar_of(|t| {
            let x = t.constant(Tensor::from_slice(&[1, v.len()], v)?);
            jem_energy(t, x)
        })
    };
    let w = (energy(&[2.5]) + 2.5).abs().max((energy(&[0.0, 0.0, 0.0]) + 3f64.ln()).abs());
    worst.push(("jem_energy", w));

    let one = |m: f64, v: f64| FrechetStats::new(vec![m], vec![v], 10).unwrap();
    let a = FrechetStats::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 4.0], 10).unwrap();
    let b = FrechetStats::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0], 10).unwrap();
    // 1D: (m1 - m2)^2 + (s1 - s2)^2 with s the standard deviation.
    let w = (frechet_distance(&one(0.0, 1.0), &one(1.0, 1.0)).unwrap() - 1.0)
        .abs()
        .max((frechet_distance(&one(0.5, 4.0), &one(-0.5, 1.0)).unwrap() - 2.0).abs())
        .max((frechet_distance(&a, &b).unwrap() - 1.0).abs());
    worst.push(("frechet", w));

    let failing: Vec<&str> = worst.iter().filter(|(_, e)| !(*e <= TOL)).map(|(n, _)| *n).collect();
    let (name, max) = worst.iter().fold(("", 0.0f64), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });
    Verdict::new(
        failing.is_empty(),
        format!(
            "worst |error| {max:.1e} ({name}){}",
            if failing.is_empty() { String::new() } else { format!("; failing: {}", failing.join(", ")) }
        ),
    )
}

/// E(x) = -x^2 / 2, so p(x) ∝ exp(E) is the standard normal.
pub fn langevin() -> Verdict {
    const CHAINS: usize = 10;
    const BURN_IN: usize = 1000;
    let cfg = LangevinConfig {
        steps: 5000,
        step_size: 0.01,
        clamp: None,
        ..LangevinConfig::default()
    };
    let mut per_chain: Vec<Vec<f64>> = vec![Vec::new(); CHAINS];
    let mut step = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let r = sample_chain(
        Tensor::zeros(&[CHAINS]),
        |x| {
            if step >= BURN_IN {
                for (c, &v) in x.data().iter().enumerate() {
                    per_chain[c].push(v as f64);
                }
            }
            step += 1;
            Ok(x.map(|v| -v))
        },
        &cfg,
        &mut rng,
    );
    if let Err(e) = r {
        return Verdict::new(false, format!("sampler failed: {e}"));
    }
    // Chains are averaged by pooling their samples around the common mean; a
    // per-chain mean would absorb part of the slow (~200 step) fluctuations.
    let pooled: Vec<f64> = per_chain.concat();
    let n = pooled.len() as f64;
    let mean = pooled.iter().sum::<f64>() / n;
    let var = pooled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Verdict::new(
        (var - 1.0).abs() < 0.15,
        format!("pooled variance {var:.4} over {CHAINS} chains (T=5000, step 0.01, burn-in {BURN_IN}); target 1.0"),
    )
}

fn file_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

pub fn dataset() -> Verdict {
    let seeds = [0u64, 1, 7, 42, 0xdead_beef];
    let vocab = Vocabulary::default();
    let mut problems = Vec::new();
    let mut checked = 0usize;
    for (k, &seed) in seeds.iter().enumerate() {
        let scheme = if k % 2 == 0 { SplitScheme::Shortcut } else { SplitScheme::SphereAnchor };
        let cfg = SplitConfig {
            scale: 0.02,
            seed,
            scheme,
            ..SplitConfig::default()
        };
        let splits = match generate_splits(&cfg) {
            Ok(s) => s,
            Err(e) => {
                problems.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        for s in &splits {
            if s.examples.len() != cfg.count(s.kind) {
                problems.push(format!("seed {seed}: {} has {} examples", s.kind, s.examples.len()));
            }
        }
        let combos = |kind: SplitKind| -> HashSet<(Shape, Color)> {
            splits
                .iter()
                .find(|s| s.kind == kind)
                .unwrap()
                .examples
                .iter()
                .map(|e| (e.spec.shape.unwrap(), e.spec.color))
                .collect()
        };
        let (train, test) = (combos(SplitKind::Train), combos(SplitKind::Test));
        let seen: HashSet<_> = combo_set(scheme, ComboSet::Seen).into_iter().collect();
        if !train.is_subset(&seen) {
            problems.push(format!("seed {seed}: training uses unseen combinations"));
        }
        if scheme == SplitScheme::Shortcut && !train.is_disjoint(&test) {
            problems.push(format!("seed {seed}: train and test combinations overlap"));
        }
        if scheme == SplitScheme::SphereAnchor {
            let overlap: Vec<_> = train.intersection(&test).filter(|c| c.0 != Shape::Sphere).collect();
            if !overlap.is_empty() {
                problems.push(format!("seed {seed}: non-sphere combinations shared by train and test"));
            }
        }
        for e in splits.iter().flat_map(|s| &s.examples) {
            if let Some(qa) = &e.qa {
                checked += 1;
                let named: Vec<_> = Color::ALL
                    .iter()
                    .filter(|c| qa.tokens.contains(&vocab.index(c.name())))
                    .collect();
                if Some(qa.answer) != e.spec.shape || qa.color != e.spec.color || named != [&e.spec.color] {
                    problems.push(format!("seed {seed}: inconsistent question {:?}", qa.question));
                }
            }
        }
        let tmp = tempfile::tempdir().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        match (write_dataset(&a, &cfg), write_dataset(&b, &cfg)) {
            (Ok(_), Ok(_)) => {
                if file_bytes(&a) != file_bytes(&b) {
                    problems.push(format!("seed {seed}: regenerated files differ"));
                }
            }
            (Err(e), _) | (_, Err(e)) => problems.push(format!("seed {seed}: {e}")),
        }
    }
    let detail = if problems.is_empty() {
        format!("{} seeds, {checked} question/answer pairs consistent, files byte-identical on regeneration", seeds.len())
    } else {
        problems.join("; ")
    };
    Verdict::new(problems.is_empty(), detail)
}
