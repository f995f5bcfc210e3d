use super::*;
use crate::codec::IdentityCodec;
use crate::diffusion::respace;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_setup(side: usize, patch: usize, seed: u64) -> TrainSetup {
    TrainSetup {
        model: ModelConfig {
            layers: 2,
            hidden: 32,
            heads: 2,
            patch,
            latent_side: side,
            latent_channels: 3,
        },
        schedule: ScheduleSpec {
            t_max: 50,
            beta_start: 1e-4,
            beta_end: 2e-2,
        },
        codec: CodecSpec::Identity,
        optimizer: AdamW::with_lr(1e-3),
        batch: 2,
        vlb_weight: 0.001,
        ema_decay: 0.99,
        sample_steps: 10,
        seed,
    }
}

fn fake_pairs(n: usize, side: usize, seed: u64) -> Vec<(Tensor<f32>, Tensor<f32>)> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let a = Tensor::<f32>::rand_uniform(vec![side, side, 3], -1.0, 1.0, &mut r);
            let b = Tensor::<f32>::rand_uniform(vec![side, side, 3], -1.0, 1.0, &mut r);
            (a, b)
        })
        .collect()
}

fn fresh_state(seed: u64) -> TrainState {
    TrainState::new(small_setup(8, 2, seed), Codec::Identity(IdentityCodec), 0.6).unwrap()
}

#[test]
fn identical_seeds_give_bit_identical_loss_sequences() {
    let pairs = fake_pairs(4, 8, 100);
    let mut a = fresh_state(7);
    let mut b = fresh_state(7);
    for step in 0..5 {
        let batch = &pairs[(step % 2) * 2..(step % 2) * 2 + 2];
        let ra = training_step(&mut a, batch).unwrap();
        let rb = training_step(&mut b, batch).unwrap();
        assert_eq!(ra, rb, "loss diverged at step {step}");
    }
    let mut c = fresh_state(8);
    let rc = training_step(&mut c, &pairs[0..2]).unwrap();
    let mut a2 = fresh_state(7);
    let ra = training_step(&mut a2, &pairs[0..2]).unwrap();
    assert_ne!(ra.total, rc.total, "different seeds should differ");
}

#[test]
fn paired_flip_is_applied_jointly() {
    // flipping inside assembly equals pre-flipping both images: no
    // left/right leakage between the conditional and the target.
    let codec = IdentityCodec;
    let mut r = rng(11);
    let deg = Tensor::<f32>::rand_uniform(vec![6, 6, 3], -1.0, 1.0, &mut r);
    let refr = Tensor::<f32>::rand_uniform(vec![6, 6, 3], -1.0, 1.0, &mut r);
    let (z0_a, zc_a) = assemble_example(&deg, &refr, true, &codec, 0.5).unwrap();
    let (z0_b, zc_b) = assemble_example(
        &deg.hflip().unwrap(),
        &refr.hflip().unwrap(),
        false,
        &codec,
        0.5,
    )
    .unwrap();
    assert_eq!(z0_a.data(), z0_b.data());
    assert_eq!(zc_a.data(), zc_b.data());
    // and the flip actually moves pixels
    let (z0_plain, _) = assemble_example(&deg, &refr, false, &codec, 0.5).unwrap();
    assert_ne!(z0_a.data(), z0_plain.data());
}

#[test]
fn one_pixel_smoke_training_reaches_low_mse() {
    // degraded == reference on a 1-pixel dataset; the noise MSE must fall
    // below 0.5 within 2000 steps.
    let mut setup = small_setup(1, 1, 3);
    setup.batch = 4;
    let mut state = TrainState::new(setup, Codec::Identity(IdentityCodec), 0.6).unwrap();
    let mut r = rng(42);
    let pairs: Vec<(Tensor<f32>, Tensor<f32>)> = (0..8)
        .map(|_| {
            let img = Tensor::<f32>::rand_uniform(vec![1, 1, 3], -1.0, 1.0, &mut r);
            (img.clone(), img)
        })
        .collect();
    let mut recent = Vec::new();
    for step in 0..2000 {
        let batch: Vec<_> = (0..4).map(|i| pairs[(step * 4 + i) % 8].clone()).collect();
        let report = training_step(&mut state, &batch).unwrap();
        if step >= 1950 {
            recent.push(report.l_simple);
        }
    }
    let mean = recent.iter().sum::<f64>() / recent.len() as f64;
    assert!(mean < 0.5, "l_simple stayed at {mean}");
}

#[test]
fn p_sample_with_fresh_model_matches_closed_form() {
    // zero-initialized model: eps = 0, v = 0, so mu = x_t / sqrt(alpha_s)
    // and sigma^2 = beta_tilde_s.
    let state = fresh_state(5);
    let schedule = state.schedule().clone();
    let respaced = respace(&schedule, schedule.t_max()).unwrap();
    let mut r = rng(6);
    let shape = vec![8, 8, 3];
    let xt = Tensor::<f32>::randn(shape.clone(), &mut r);
    let zc = Tensor::<f32>::randn(shape.clone(), &mut r);
    let s_idx = 20;
    let noise = Tensor::<f32>::randn(shape.clone(), &mut r);
    let out = p_sample(
        &state.model,
        None,
        &xt,
        &zc,
        s_idx,
        &respaced,
        Some(&noise),
        false,
    )
    .unwrap();
    let mu_coef = 1.0 / (respaced.schedule.alpha(s_idx) as f32).sqrt();
    let sigma = (respaced.schedule.posterior_variance(s_idx) as f32).sqrt();
    for ((o, x), n) in out.data().iter().zip(xt.data()).zip(noise.data()) {
        let expect = x * mu_coef + sigma * n;
        assert!((o - expect).abs() < 1e-5, "{o} vs {expect}");
    }
}

#[test]
fn p_sample_final_step_is_deterministic() {
    let state = fresh_state(5);
    let respaced = respace(state.schedule(), 10).unwrap();
    let mut r = rng(9);
    let shape = vec![8, 8, 3];
    let xt = Tensor::<f32>::randn(shape.clone(), &mut r);
    let zc = Tensor::<f32>::randn(shape, &mut r);
    // no noise tensor needed at s = 1
    let a = p_sample(&state.model, None, &xt, &zc, 1, &respaced, None, false).unwrap();
    let b = p_sample(&state.model, None, &xt, &zc, 1, &respaced, None, false).unwrap();
    assert_eq!(a.data(), b.data());
    let mu_coef = 1.0 / (respaced.schedule.alpha(1) as f32).sqrt();
    for (o, x) in a.data().iter().zip(xt.data()) {
        assert!((o - x * mu_coef).abs() < 1e-5);
    }
}

#[test]
fn sample_loop_is_seed_deterministic_and_shape_preserving() {
    let state = fresh_state(5);
    let mut r = rng(10);
    let degraded = Tensor::<f32>::rand_uniform(vec![8, 8, 3], -1.0, 1.0, &mut r);
    let run = |seed: u64| {
        let mut srng = rng(seed);
        sample_loop(
            &state.model,
            Some(&state.ema),
            &state.codec,
            state.schedule(),
            state.latent_scale,
            &degraded,
            SampleOptions::new(10),
            &mut srng,
        )
        .unwrap()
    };
    let a = run(1);
    let b = run(1);
    let c = run(2);
    assert_eq!(a.shape(), degraded.shape());
    assert_eq!(a.data(), b.data());
    assert_ne!(a.data(), c.data());
    assert!(a.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
}

#[test]
fn sample_loop_rejects_too_many_steps() {
    let state = fresh_state(5);
    let mut r = rng(12);
    let degraded = Tensor::<f32>::zeros(vec![8, 8, 3]);
    let err = sample_loop(
        &state.model,
        None,
        &state.codec,
        state.schedule(),
        state.latent_scale,
        &degraded,
        SampleOptions::new(51),
        &mut r,
    )
    .unwrap_err();
    assert!(matches!(err, Error::InvalidParameter(_)));
}

#[test]
fn epoch_permutations_are_reproducible_and_distinct() {
    let a = epoch_permutation(16, 9, 0);
    let b = epoch_permutation(16, 9, 0);
    assert_eq!(a, b);
    let c = epoch_permutation(16, 9, 1);
    assert_ne!(a, c);
    let mut sorted = a.clone();
    sorted.sort();
    assert_eq!(sorted, (0..16).collect::<Vec<_>>());
}

#[test]
fn checkpoint_roundtrip_restores_training_exactly() {
    let dir = std::env::temp_dir().join("icdt_ckpt_test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("s.ckpt");

    let pairs = fake_pairs(4, 8, 200);
    let mut state = fresh_state(21);
    for step in 0..3 {
        training_step(&mut state, &pairs[(step % 2) * 2..(step % 2) * 2 + 2]).unwrap();
    }
    checkpoint::save_checkpoint(&state, &path).unwrap();

    // identical bytes on re-save
    let bytes_a = std::fs::read(&path).unwrap();
    let path_b = dir.join("s2.ckpt");
    checkpoint::save_checkpoint(&state, &path_b).unwrap();
    assert_eq!(bytes_a, std::fs::read(&path_b).unwrap());

    let mut restored = checkpoint::load_checkpoint(&path).unwrap();
    assert_eq!(restored.step, state.step);
    assert_eq!(restored.latent_scale, state.latent_scale);
    assert_eq!(restored.setup, state.setup);

    let next = &pairs[2..4];
    let orig = training_step(&mut state, next).unwrap();
    let rest = training_step(&mut restored, next).unwrap();
    assert_eq!(orig, rest, "restored state diverged on the next step");

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn training_compute_formula() {
    // 1.41 GFLOPs, batch 32, 90K iterations: about 1.22e16 total
    let total = training_compute_flops(1_410_000_000, 32, 90_000);
    assert_eq!(total, 1.41e9 * 32.0 * 9e4 * 3.0);
    assert!((total / 1.22e16 - 1.0).abs() < 0.01, "{total}");
}

#[test]
fn run_training_drops_partial_batches() {
    // 5 pairs, batch 2: only 2 batches per epoch are used.
    let dir = std::env::temp_dir().join("icdt_runtrain_test");
    std::fs::remove_dir_all(&dir).ok();
    crate::data::write_synthetic_dataset(&dir, 5, 8, 33).unwrap();
    let ds = crate::data::PairedDataset::open(&dir).unwrap();
    let mut state = fresh_state(3);
    let mut steps_seen = 0;
    run_training(&mut state, &ds, 6, |_, r| {
        steps_seen += 1;
        assert_eq!(r.step, steps_seen);
        Ok(())
    })
    .unwrap();
    assert_eq!(state.step, 6); // 3 epochs x 2 full batches
    std::fs::remove_dir_all(&dir).ok();
}
