use pcvq::augment::AugMode;
use pcvq::checkpoint::Checkpoint;
use pcvq::data::synth_image;
use pcvq::image::ImageTensor;
use pcvq::rng::SampleRng;
use pcvq::train::{self, lr_for_phase, TrainConfig};
use pcvq::vqvae::{LatentMap, Level, VqConfig};
use pcvq::Error;

fn corpus(n: usize, res: usize) -> Vec<ImageTensor> {
    (0..n as u64).map(|i| synth_image(21, i, res)).collect()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        seed: 4,
        batch_size: 4,
        vqvae_iterations: 6,
        vq: VqConfig {
            resolution: 16,
            hidden: 8,
            res_blocks: 1,
            codebook_size: 16,
            code_dim: 8,
            bottom_grid: 4,
            ..VqConfig::default()
        },
        prior_channels: 8,
        top_blocks: 2,
        bottom_blocks: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn lr_table_is_scale_independent() {
    let want = [3e-4, 3e-5, 7.5e-6, 3e-6, 6e-7, 3e-7];
    for scale in [1.0, 0.01, 0.5] {
        let cfg = TrainConfig { scale, ..TrainConfig::default() };
        for (phase, w) in (1..=6).zip(want) {
            let lr = lr_for_phase(&cfg, phase).unwrap();
            assert!((lr - w).abs() <= 1e-18, "phase {phase}: {lr}");
        }
        assert!(lr_for_phase(&cfg, 0).is_err() && lr_for_phase(&cfg, 7).is_err());
    }
}

#[test]
fn phased_prior_resets_the_optimizer_at_scaled_boundaries() {
    let cfg = TrainConfig { scale: 0.01, ..tiny_config() };
    let data = corpus(8, 16);
    let vq = train::train_vqvae(&data, &cfg).unwrap();
    let vq = train::load_vqvae(&vq.checkpoint).unwrap();
    let before = vq.clone();
    let out = train::train_prior(Level::Top, &data, &vq, &cfg).unwrap();
    assert_eq!(vq, before, "autoencoder must stay frozen");

    assert_eq!(out.resets, [100, 200, 300, 400, 450]);
    assert_eq!(out.metrics.len(), 500);
    let mut last = (0, 0);
    for (row, steps) in out.metrics.iter().zip(&out.adam_steps) {
        assert!(row.phase >= last.0);
        assert_eq!(row.lr, lr_for_phase(&cfg, row.phase).unwrap());
        // step counts restart from 1 after every reset
        let expected = if out.resets.contains(&row.iteration) { 1 } else { last.1 + 1 };
        assert_eq!(*steps, expected, "iteration {}", row.iteration);
        last = (row.phase, *steps);
    }
    assert_eq!(out.metrics.last().unwrap().phase, 6);
    let ck = &out.checkpoint;
    assert_eq!((ck.iteration, ck.phase), (500, 6));
    assert_eq!(ck.tensors.keys().filter(|k| k.ends_with(".step")).count() > 0, true);
}

#[test]
fn baseline_modes_never_reset_and_hold_base_rate() {
    for mode in [AugMode::Standard, AugMode::None] {
        let cfg = TrainConfig {
            scale: 0.002,
            aug_mode: mode,
            ..tiny_config()
        };
        let data = corpus(4, 16);
        let vq = train::load_vqvae(&train::train_vqvae(&data, &cfg).unwrap().checkpoint).unwrap();
        let out = train::train_prior(Level::Bottom, &data, &vq, &cfg).unwrap();
        assert!(out.resets.is_empty());
        assert_eq!(out.metrics.len(), 100);
        assert!(out.metrics.iter().all(|r| r.phase == 1 && r.lr == 3e-4));
        assert_eq!(out.adam_steps.last(), Some(&100));
    }
}

#[test]
fn phased_mode_requires_the_default_schedule_length() {
    let cfg = TrainConfig {
        prior_iterations: 40_000,
        ..tiny_config()
    };
    let data = corpus(4, 16);
    let vq = pcvq::vqvae::VqVae::new(cfg.vq.clone(), 0).unwrap();
    assert!(matches!(train::train_prior(Level::Top, &data, &vq, &cfg), Err(Error::Config(_))));
}

#[test]
fn training_is_bitwise_reproducible() {
    let cfg = TrainConfig { scale: 0.0004, ..tiny_config() };
    let data = corpus(6, 16);
    let run = || {
        let v = train::train_vqvae(&data, &cfg).unwrap();
        let vq = train::load_vqvae(&v.checkpoint).unwrap();
        let t = train::train_prior(Level::Top, &data, &vq, &cfg).unwrap();
        let b = train::train_prior(Level::Bottom, &data, &vq, &cfg).unwrap();
        (
            v.checkpoint.to_bytes(),
            t.checkpoint.to_bytes(),
            b.checkpoint.to_bytes(),
            train::metrics_csv(&t.metrics),
        )
    };
    let first = run();
    assert_eq!(first, run());
    let other = TrainConfig { seed: 5, ..cfg.clone() };
    assert_ne!(train::train_vqvae(&data, &other).unwrap().checkpoint.to_bytes(), first.0);
}

#[test]
fn vqvae_loss_halves_on_a_small_corpus() {
    let cfg = TrainConfig {
        scale: 0.05,
        batch_size: 8,
        vqvae_iterations: 4000,
        ..TrainConfig::default()
    };
    let data = corpus(16, 32);
    let out = train::train_vqvae(&data, &cfg).unwrap();
    assert_eq!(out.metrics.len(), 200);
    assert!(out.metrics.iter().all(|r| r.phase == 1 && r.lr == 3e-4));
    let first = out.metrics[0].loss;
    let last = out.metrics.last().unwrap().loss;
    assert!(last < 0.5 * first, "loss {first} -> {last}");

    // trained reconstructions beat random codes
    let vq = train::load_vqvae(&out.checkpoint).unwrap();
    let maps = vq.encode_batch(&data).unwrap();
    let recon = vq.decode_batch(&maps).unwrap();
    let mut r = SampleRng::new(1, 0, 0);
    let k = vq.config.codebook_size;
    let random: Vec<(LatentMap, LatentMap)> = maps
        .iter()
        .map(|(t, b)| {
            let mut draw = |m: &LatentMap| {
                LatentMap::new(m.level, m.side, m.values.iter().map(|_| r.uniform_index(k)).collect()).unwrap()
            };
            (draw(t), draw(b))
        })
        .collect();
    let noise = vq.decode_batch(&random).unwrap();
    let mse = |imgs: &[ImageTensor]| imgs.iter().zip(&data).map(|(a, b)| a.mse(b)).sum::<f64>();
    assert!(mse(&recon) < mse(&noise));
}

#[test]
fn prior_nll_drops_below_uniform() {
    let cfg = TrainConfig {
        scale: 0.01,
        aug_mode: AugMode::Standard,
        ..tiny_config()
    };
    let data = corpus(8, 16);
    let vq = train::load_vqvae(&train::train_vqvae(&data, &cfg).unwrap().checkpoint).unwrap();
    let out = train::train_prior(Level::Top, &data, &vq, &cfg).unwrap();
    let uniform = (cfg.vq.codebook_size as f64).ln();
    let tail: Vec<f64> = out.metrics.iter().rev().take(20).map(|r| r.loss).collect();
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(mean < uniform, "{mean} vs ln K = {uniform}");
}

#[test]
fn checkpoints_reload_into_equivalent_models() {
    let cfg = TrainConfig { scale: 0.0004, ..tiny_config() };
    let data = corpus(4, 16);
    let dir = tempfile::tempdir().unwrap();
    let v = train::train_vqvae(&data, &cfg).unwrap();
    v.checkpoint.save(dir.path().join("v.ckpt")).unwrap();
    let loaded = Checkpoint::load(dir.path().join("v.ckpt")).unwrap();
    assert_eq!(loaded, v.checkpoint);
    let vq = train::load_vqvae(&loaded).unwrap();
    assert_eq!(train::embedded_config(&loaded).unwrap().seed, cfg.seed);
    let t = train::train_prior(Level::Top, &data, &vq, &cfg).unwrap();
    let top = train::load_prior(&t.checkpoint).unwrap();
    assert!(t.checkpoint.tensors.keys().all(|k| k.starts_with("prior.top.") || k.starts_with("adam.")));
    let b = train::train_prior(Level::Bottom, &data, &vq, &cfg).unwrap();
    let bottom = train::load_prior(&b.checkpoint).unwrap();
    assert!(b.checkpoint.tensors.keys().any(|k| k.starts_with("prior.bottom.")));
    train::check_compatible(&vq, &top, &bottom).unwrap();
    assert!(train::check_compatible(&vq, &bottom, &top).is_err());
    assert!(train::load_prior(&v.checkpoint).is_err());
}

#[test]
fn non_finite_training_aborts_with_a_diagnostic_checkpoint() {
    let cfg = TrainConfig {
        base_lr: 1e300,
        grad_clip: None,
        vqvae_iterations: 20,
        ..tiny_config()
    };
    match train::train_vqvae(&corpus(4, 16), &cfg) {
        Err(Error::Diverged { iteration, checkpoint, .. }) => {
            assert!(iteration < 20);
            assert_eq!(checkpoint.iteration, iteration);
            assert!(!checkpoint.tensors.is_empty());
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.metrics.len())),
    }
}

#[test]
fn metrics_rows_match_iteration_count() {
    let cfg = TrainConfig { vqvae_iterations: 7, ..tiny_config() };
    let out = train::train_vqvae(&corpus(4, 16), &cfg).unwrap();
    assert_eq!(out.metrics.len(), 7);
    let csv = train::metrics_csv(&out.metrics);
    assert_eq!(csv.lines().count(), 8);
    assert_eq!(csv.lines().next(), Some("iteration,phase,lr,loss"));
    assert!(out.metrics.iter().enumerate().all(|(i, r)| r.iteration == i as u64));
}
