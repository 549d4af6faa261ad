use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sslab_core::augment::AugmentConfig;
use sslab_core::ebm::{
    ebm_loss, input_gradient, langevin_step, pretrain_ebm, sample_chain, EbmModel, EbmTrainConfig,
    LangevinConfig, ReplayBuffer,
};
use sslab_core::gradcheck::gradient_check;
use sslab_core::nn::{AdamState, EncoderConfig};
use sslab_core::{Error, ParamStore, Tape, Tensor};

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        input_size: 8,
        in_channels: 3,
        stem_channels: 4,
        stem_stride: 1,
        stages: 1,
        blocks_per_stage: 1,
        embed_dim: 6,
        norm_groups: 2,
        slope: 0.2,
    }
}

fn tiny_train(epochs: usize) -> EbmTrainConfig {
    EbmTrainConfig {
        epochs,
        batch_size: 4,
        lr: 1e-3,
        langevin: LangevinConfig {
            steps: 3,
            ..LangevinConfig::default()
        },
        augment: AugmentConfig::identity(),
        ..EbmTrainConfig::default()
    }
}

fn images(seed: u64, n: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, 3, 8, 8], |_| rng.random_range(-1.0..1.0))
}

#[test]
fn zero_step_is_identity() {
    let x = images(1, 2);
    let g = images(2, 2);
    let zero = Tensor::zeros(x.shape());
    let y = langevin_step(&x, &g, 0.0, &zero, Some((-1.0, 1.0))).unwrap();
    assert!(x.bit_eq(&y));
}

#[test]
fn noiseless_chain_with_tiny_step_barely_moves() {
    let x = images(3, 2);
    let cfg = LangevinConfig {
        steps: 10,
        step_size: 1e-8,
        noise_scale: Some(0.0),
        ..LangevinConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y = sample_chain(x.clone(), |v| Ok(v.map(|_| 1.0)), &cfg, &mut rng).unwrap();
    assert!(x.max_abs_diff(&y).unwrap() < 1e-6);
}

#[test]
fn constant_energy_is_a_random_walk() {
    // Zero gradient: each step adds N(0, step_size) and nothing else.
    let cfg = LangevinConfig {
        steps: 4,
        step_size: 0.01,
        clamp: None,
        ..LangevinConfig::default()
    };
    let x = Tensor::zeros(&[20000]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y = sample_chain(x, |v| Ok(Tensor::zeros(v.shape())), &cfg, &mut rng).unwrap();
    let n = y.numel() as f64;
    let mean = y.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = y.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 0.005, "{mean}");
    assert!((var / 0.04 - 1.0).abs() < 0.05, "{var}");
}

#[test]
fn quadratic_energy_has_unit_stationary_variance() {
    // E(x) = -x^2 / 2 gives p(x) ∝ exp(-x^2 / 2). The discrete chain's exact
    // stationary variance is step / (1 - (1 - step / 2)^2) ≈ 1.0025.
    let cfg = LangevinConfig {
        steps: 5000,
        step_size: 0.01,
        clamp: None,
        ..LangevinConfig::default()
    };
    let chains = 100;
    let burn_in = 1000;
    let mut seen = Vec::new();
    let mut step = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    sample_chain(
        Tensor::zeros(&[chains]),
        |x| {
            if step >= burn_in {
                seen.extend(x.data().iter().map(|&v| v as f64));
            }
            step += 1;
            Ok(x.map(|v| -v))
        },
        &cfg,
        &mut rng,
    )
    .unwrap();
    let n = seen.len() as f64;
    let mean = seen.iter().sum::<f64>() / n;
    let var = seen.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!((var - 1.0).abs() < 0.15, "variance {var}");
}

#[test]
fn noiseless_steps_ascend_the_energy() {
    let c = [0.3f32, -0.2, 0.5];
    let energy = |x: &Tensor| -> f32 { x.data().iter().zip(c.iter().cycle()).map(|(v, c)| -(v - c).powi(2)).sum() };
    let mut x = Tensor::from_slice(&[6], &[0.9, -0.9, 0.0, 0.1, 0.7, -0.5]).unwrap();
    let zero = Tensor::zeros(&[6]);
    for _ in 0..20 {
        let g = Tensor::from_fn(&[6], |i| -2.0 * (x.data()[i] - c[i % 3]));
        let y = langevin_step(&x, &g, 0.1, &zero, Some((-1.0, 1.0))).unwrap();
        assert!(energy(&y) > energy(&x));
        x = y;
    }
}

#[test]
fn non_finite_gradient_aborts_chain() {
    let cfg = LangevinConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = sample_chain(images(1, 1), |x| Ok(x.map(|_| f32::NAN)), &cfg, &mut rng);
    assert!(matches!(r, Err(Error::NonFinite(_))));
}

#[test]
fn attached_sampling_is_rejected() {
    let cfg = LangevinConfig {
        detach: false,
        ..LangevinConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let cfg = LangevinConfig {
        steps: 0,
        ..LangevinConfig::default()
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn buffer_draw_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let empty = ReplayBuffer::new(100, 0.0);
    let (_, fresh) = empty.draw(16, &[3], &mut rng).unwrap();
    assert_eq!(fresh, 16);

    let mut buf = ReplayBuffer::new(100, 0.0);
    buf.push(&Tensor::from_slice(&[2, 3], &[0.5, 0.5, 0.5, -0.25, -0.25, -0.25]).unwrap());
    let (x, fresh) = buf.draw(32, &[3], &mut rng).unwrap();
    assert_eq!(fresh, 0);
    for row in x.data().chunks(3) {
        assert!(row == [0.5; 3] || row == [-0.25; 3]);
    }

    buf.reinit_prob = 1.0;
    let (x, fresh) = buf.draw(8, &[3], &mut rng).unwrap();
    assert_eq!(fresh, 8);
    assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));

    buf.reinit_prob = 0.05;
    let (_, fresh) = buf.draw(20000, &[3], &mut rng).unwrap();
    let frac = fresh as f64 / 20000.0;
    assert!((0.04..=0.06).contains(&frac), "{frac}");
}

#[test]
fn buffer_evicts_oldest_first() {
    let mut buf = ReplayBuffer::new(3, 0.0);
    for k in 0..5 {
        buf.push(&Tensor::full(&[1, 2], k as f32 * 0.1));
    }
    assert_eq!(buf.len(), 3);
    let firsts: Vec<f32> = (0..3).map(|i| buf.get(i).unwrap()[0]).collect();
    assert_eq!(firsts, [0.2, 0.3, 0.4]);
}

#[test]
fn loss_hand_case() {
    let mut t = Tape::<f32>::new();
    let r = t.constant(Tensor::from_slice(&[2], &[1.0, 3.0]).unwrap());
    let f = t.constant(Tensor::from_slice(&[2], &[0.0, 2.0]).unwrap());
    let l = ebm_loss(&mut t, r, f, 0.1).unwrap();
    // (1 - 2) + 0.1 * ((1 + 9) / 2 + (0 + 4) / 2) = -0.3
    assert!((t.value(l).data()[0] + 0.3).abs() < 1e-6);
    let mismatch = t.constant(Tensor::zeros(&[3]));
    assert!(ebm_loss(&mut t, r, mismatch, 0.1).is_err());
}

#[test]
fn loss_gradients_match_finite_differences() {
    let inputs = vec![
        Tensor::<f64>::from_slice(&[3], &[0.2, -1.1, 0.7]).unwrap(),
        Tensor::<f64>::from_slice(&[3], &[0.4, 0.9, -0.3]).unwrap(),
    ];
    let worst = gradient_check(|t, v| ebm_loss(t, v[0], v[1], 0.1), &inputs, 1e-6).unwrap();
    assert!(worst < 1e-6, "{worst}");
    // Closed form for the real-energy gradient: -1/n + 2 alpha x / n.
    let mut t = Tape::<f32>::new();
    let r = t.leaf(inputs[0].cast());
    let f = t.leaf(inputs[1].cast());
    let l = ebm_loss(&mut t, r, f, 0.1).unwrap();
    let mut g = t.backward(l).unwrap();
    let gr = g.take(r).unwrap();
    for (i, &x) in inputs[0].data().iter().enumerate() {
        let expect = -1.0 / 3.0 + 0.1 * 2.0 * x / 3.0;
        assert!((gr.data()[i] as f64 - expect).abs() < 1e-6);
    }
}

proptest! {
    #[test]
    fn loss_is_antisymmetric_without_regularizer(
        a in prop::collection::vec(-5.0f32..5.0, 4),
        b in prop::collection::vec(-5.0f32..5.0, 4),
    ) {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::from_slice(&[4], &a).unwrap());
        let y = t.constant(Tensor::from_slice(&[4], &b).unwrap());
        let l1 = ebm_loss(&mut t, x, y, 0.0).unwrap();
        let l2 = ebm_loss(&mut t, y, x, 0.0).unwrap();
        let (l1, l2) = (t.value(l1).data()[0], t.value(l2).data()[0]);
        prop_assert!((l1 + l2).abs() < 1e-5);
    }
}

#[test]
fn input_gradient_matches_energy_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let model = EbmModel::new(&mut store, &tiny_config(), &mut rng).unwrap();
    let x = images(6, 2);
    let (e, g) = input_gradient(&store, &x, |t, v| model.energy(t, v)).unwrap();
    assert_eq!(e.shape(), &[2]);
    assert_eq!(g.shape(), x.shape());
    // Central difference on one pixel of the first image.
    let h = 1e-2;
    let bump = |d: f32| {
        let mut y = x.clone();
        y.data_mut()[17] += d;
        model.energies(&store, &y).unwrap()[0]
    };
    let fd = (bump(h) - bump(-h)) / (2.0 * h);
    assert!((fd - g.data()[17]).abs() < 1e-2 * (1.0 + fd.abs()), "{fd} vs {}", g.data()[17]);
}

#[test]
fn zero_epochs_leave_model_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let model = EbmModel::new(&mut store, &tiny_config(), &mut rng).unwrap();
    let before = store.clone();
    let mut adam = AdamState::new(&store);
    let mut buf = ReplayBuffer::new(100, 0.05);
    let h = pretrain_ebm(&model, &mut store, &mut adam, &mut buf, &images(1, 10), &tiny_train(0), &mut rng, |_, _| {}).unwrap();
    assert!(h.is_empty());
    assert!(buf.is_empty());
    for (a, b) in before.tensors().iter().zip(store.tensors()) {
        assert!(a.bit_eq(b));
    }
}

#[test]
fn one_epoch_fills_buffer_by_steps_times_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let model = EbmModel::new(&mut store, &tiny_config(), &mut rng).unwrap();
    let mut adam = AdamState::new(&store);
    let mut buf = ReplayBuffer::new(100, 0.05);
    let h = pretrain_ebm(&model, &mut store, &mut adam, &mut buf, &images(2, 10), &tiny_train(1), &mut rng, |_, _| {}).unwrap();
    assert_eq!(h.len(), 3);
    assert_eq!(buf.len(), 12);
    assert!(h.iter().all(|r| r.loss.is_finite()));

    let mut small = ReplayBuffer::new(8, 0.05);
    pretrain_ebm(&model, &mut store, &mut adam, &mut small, &images(2, 10), &tiny_train(1), &mut rng, |_, _| {}).unwrap();
    assert_eq!(small.len(), 8);
}

#[test]
fn training_separates_data_from_noise() {
    // Constant gray images versus uniform noise: after a few epochs the data
    // should sit higher on the energy surface than fresh noise.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let model = EbmModel::new(&mut store, &tiny_config(), &mut rng).unwrap();
    let mut adam = AdamState::new(&store);
    let mut buf = ReplayBuffer::new(1000, 0.05);
    let data = Tensor::from_fn(&[32, 3, 8, 8], |i| if (i / 64) % 3 == 0 { 0.3 } else { -0.2 });
    let cfg = EbmTrainConfig {
        epochs: 15,
        ..tiny_train(0)
    };
    pretrain_ebm(&model, &mut store, &mut adam, &mut buf, &data, &cfg, &mut rng, |_, _| {}).unwrap();
    let e_data = model.energies(&store, &data).unwrap();
    let noise = images(11, 32);
    let e_noise = model.energies(&store, &noise).unwrap();
    let md = e_data.iter().sum::<f32>() / 32.0;
    let mn = e_noise.iter().sum::<f32>() / 32.0;
    assert!(md > mn, "data {md} noise {mn}");
}

#[test]
fn non_finite_parameters_abort_and_keep_store() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let model = EbmModel::new(&mut store, &tiny_config(), &mut rng).unwrap();
    let id = store.find("energy.weight").unwrap();
    store.get_mut(id).data_mut()[0] = f32::NAN;
    let before = store.clone();
    let mut adam = AdamState::new(&store);
    let mut buf = ReplayBuffer::new(100, 0.05);
    let r = pretrain_ebm(&model, &mut store, &mut adam, &mut buf, &images(3, 8), &tiny_train(1), &mut rng, |_, _| {});
    assert!(matches!(r, Err(Error::NonFinite(_))));
    for (a, b) in before.tensors().iter().zip(store.tensors()) {
        assert!(a.bit_eq(b));
    }
}

#[test]
fn single_step_chain_equals_one_langevin_step() {
    let x = images(12, 2);
    let cfg = LangevinConfig {
        steps: 1,
        step_size: 0.05,
        noise_scale: Some(0.1),
        ..LangevinConfig::default()
    };
    let grad = |v: &Tensor| v.map(|a| 0.5 - a);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let chained = sample_chain(x.clone(), |v| Ok(grad(v)), &cfg, &mut rng).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let normal = rand_distr::Normal::new(0.0f32, 0.1).unwrap();
    let noise = Tensor::from_fn(x.shape(), |_| rand_distr::Distribution::sample(&normal, &mut rng));
    let direct = langevin_step(&x, &grad(&x), 0.05, &noise, Some((-1.0, 1.0))).unwrap();
    assert!(chained.bit_eq(&direct));
}

#[test]
fn chain_output_stays_in_clamp_range() {
    for steps in [1, 2, 5, 20] {
        let cfg = LangevinConfig {
            steps,
            step_size: 0.5,
            ..LangevinConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(steps as u64);
        let mut inside = true;
        let y = sample_chain(
            images(4, 3),
            |v| {
                inside &= v.data().iter().all(|a| (-1.0..=1.0).contains(a));
                Ok(v.map(|_| 3.0))
            },
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert!(inside);
        assert!(y.data().iter().all(|a| (-1.0..=1.0).contains(a)));
    }
}

#[test]
fn sampling_raises_mean_energy_over_uniform_inits() {
    let energy = |x: &Tensor| x.data().iter().map(|v| -v * v / 2.0).sum::<f32>() / x.numel() as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let init = Tensor::from_fn(&[2000], |_| rng.random_range(-1.0..1.0));
    // With the default noise sqrt(step) the chain targets N(0, 1), whose mean
    // energy -1/2 sits below the uniform start's -1/6. Ascent is a property of
    // the drift, so the noise is overridden to a small value.
    let cfg = LangevinConfig {
        steps: 200,
        step_size: 0.01,
        noise_scale: Some(0.01),
        clamp: None,
        ..LangevinConfig::default()
    };
    let y = sample_chain(init.clone(), |v| Ok(v.map(|a| -a)), &cfg, &mut rng).unwrap();
    assert!(energy(&y) > energy(&init), "{} vs {}", energy(&y), energy(&init));
}

#[test]
fn loss_trivial_cases() {
    let mut t = Tape::<f32>::new();
    let z = t.constant(Tensor::zeros(&[3]));
    let l = ebm_loss(&mut t, z, z, 0.7).unwrap();
    assert_eq!(t.value(l).data()[0], 0.0);
    let r = t.constant(Tensor::from_slice(&[1], &[1.0]).unwrap());
    let f = t.constant(Tensor::from_slice(&[1], &[3.0]).unwrap());
    let l = ebm_loss(&mut t, r, f, 0.0).unwrap();
    assert_eq!(t.value(l).data()[0], 2.0);
}

#[test]
fn cd_parameter_gradient_on_toy_energy() {
    // E_theta(x) = theta . x; the CD gradient is mean(x_fake) - mean(x_real).
    use sslab_core::gradcheck::param_gradient_check;
    let mut store = ParamStore::<f64>::new();
    let theta = store.add("theta", Tensor::from_slice(&[2, 1], &[0.3, -0.8]).unwrap());
    let real = Tensor::<f64>::from_slice(&[2, 2], &[1.0, 0.5, -0.2, 0.4]).unwrap();
    let fake = Tensor::<f64>::from_slice(&[2, 2], &[0.1, -0.9, 0.6, 0.2]).unwrap();
    let build = |t: &mut Tape<f64>| {
        let w = t.param(theta);
        let xr = t.constant(real.clone());
        let xf = t.constant(fake.clone());
        let er = t.matmul(xr, w).unwrap();
        let er = t.reshape(er, &[2]).unwrap();
        let ef = t.matmul(xf, w).unwrap();
        let ef = t.reshape(ef, &[2]).unwrap();
        ebm_loss(t, er, ef, 0.0).unwrap()
    };
    let mut t = Tape::new();
    t.bind(&store, true);
    let l = build(&mut t);
    let mut g = t.backward(l).unwrap();
    let gt = g.param_grads(&store).remove(0);
    let expect = [(0.1 + 0.6 - 1.0 + 0.2) / 2.0, (-0.9 + 0.2 - 0.5 - 0.4) / 2.0];
    for (a, b) in gt.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
    let worst = param_gradient_check(&store, |t| Ok(build(t)), 1e-6).unwrap();
    assert!(worst < 1e-6, "{worst}");
}
