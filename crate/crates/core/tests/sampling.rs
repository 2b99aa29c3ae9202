use pcvq::pixelcnn::{PriorConfig, PriorModel};
use pcvq::rng::SampleRng;
use pcvq::sample::{generate_images, generate_latents, sample_level, sample_level_traced, softmax, LogitModel, SamplerRequest};
use pcvq::tensor::Graph;
use pcvq::vqvae::{LatentMap, Level, VqConfig, VqVae};
use pcvq::Error;

/// Hand-built model: position p puts all its mass on `next(value at p - 1)`.
struct Chain {
    k: usize,
    side: usize,
}

impl Chain {
    fn next(&self, v: usize) -> usize {
        (3 * v + 1) % self.k
    }
}

impl LogitModel for Chain {
    fn level(&self) -> Level {
        Level::Top
    }
    fn vocab(&self) -> usize {
        self.k
    }
    fn side(&self) -> usize {
        self.side
    }
    fn needs_condition(&self) -> bool {
        false
    }
    fn logits(&self, maps: &[LatentMap], _: Option<&[LatentMap]>) -> pcvq::Result<Vec<f64>> {
        let (k, l) = (self.k, self.side * self.side);
        let mut out = vec![0.0; maps.len() * k * l];
        for (i, m) in maps.iter().enumerate() {
            for p in 1..l {
                out[(i * k + self.next(m.values[p - 1])) * l + p] = 1000.0;
            }
        }
        Ok(out)
    }
}

#[test]
fn top_left_index_is_uniform_over_seeds() {
    let k = 16;
    let model = Chain { k, side: 2 };
    let mut rngs: Vec<SampleRng> = (0..10_000).map(|s| SampleRng::new(s, 0, 0)).collect();
    let (maps, _) = sample_level_traced(&model, None, &mut rngs, 1.0).unwrap();
    let mut counts = vec![0f64; k];
    for m in &maps {
        counts[m.values[0]] += 1.0;
    }
    let expected = maps.len() as f64 / k as f64;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    // critical value of chi-square with 15 degrees of freedom at 0.01
    assert!(chi2 < 30.578, "chi2 = {chi2}, counts {counts:?}");
}

#[test]
fn one_hot_model_gives_greedy_completion_from_every_start() {
    let model = Chain { k: 8, side: 3 };
    let mut seen = [false; 8];
    for seed in 0..400 {
        let map = sample_level(&model, None, &mut SampleRng::new(seed, 0, 0), 1.0).unwrap();
        let start = map.values[0];
        seen[start] = true;
        let mut want = vec![start];
        for _ in 1..9 {
            want.push(model.next(*want.last().unwrap()));
        }
        assert_eq!(map.values, want);
    }
    assert!(seen.iter().all(|&s| s), "{seen:?}");
}

fn top_model(k: usize, side: usize, seed: u64) -> PriorModel {
    let mut cfg = PriorConfig::top(k, side);
    cfg.channels = 8;
    cfg.blocks = 2;
    cfg.attention_every = Some(1);
    PriorModel::new(cfg, seed).unwrap()
}

fn bottom_model(k: usize, side: usize, seed: u64) -> PriorModel {
    let mut cfg = PriorConfig::bottom(k, side, k, side / 2);
    cfg.channels = 8;
    cfg.blocks = 2;
    PriorModel::new(cfg, seed).unwrap()
}

fn full_logits(model: &PriorModel, maps: &[LatentMap], cond: Option<&[LatentMap]>) -> Vec<f64> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false).unwrap();
    let y = model.forward_logits(&mut g, &p, maps, cond, None).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn completed_grid_reproduces_every_sampling_distribution() {
    let (k, side) = (6, 4);
    let top = top_model(k, side / 2, 1);
    let bottom = bottom_model(k, side, 2);
    let mut rngs: Vec<_> = (0..3).map(|i| SampleRng::new(9, 0, i)).collect();
    let (tops, top_trace) = sample_level_traced(&top, None, &mut rngs, 1.0).unwrap();
    let mut rngs: Vec<_> = (0..3).map(|i| SampleRng::new(10, 0, i)).collect();
    let (bottoms, bottom_trace) = sample_level_traced(&bottom, Some(&tops), &mut rngs, 1.0).unwrap();

    for (model, maps, cond, trace) in [
        (&top, &tops, None, &top_trace),
        (&bottom, &bottoms, Some(tops.as_slice()), &bottom_trace),
    ] {
        let logits = full_logits(model, maps, cond);
        let l = model.side() * model.side();
        for (i, per_pos) in trace.iter().enumerate() {
            assert_eq!(per_pos.len(), l);
            for (pos, probs) in per_pos.iter().enumerate().skip(1) {
                let row: Vec<f64> = (0..k).map(|c| logits[(i * k + c) * l + pos]).collect();
                let again = softmax(&row, 1.0);
                for (a, b) in again.iter().zip(probs) {
                    assert!((a - b).abs() < 1e-12, "sample {i} position {pos}");
                }
            }
        }
        assert!(maps.iter().all(|m| m.values.iter().all(|&v| v < k)));
    }
}

#[test]
fn exactly_one_draw_per_position() {
    let (k, side) = (5, 4);
    let top = top_model(k, side / 2, 3);
    let bottom = bottom_model(k, side, 4);
    let mut r = SampleRng::instrumented(1, 0, 0);
    let t = sample_level(&top, None, &mut r, 1.0).unwrap();
    assert_eq!(r.draws().len(), 4);
    let mut r = SampleRng::instrumented(1, 0, 1);
    sample_level(&bottom, Some(&t), &mut r, 1.0).unwrap();
    assert_eq!(r.draws().len(), 16);
    let d = r.draws();
    assert_eq!((d[0].lo, d[0].hi), (0.0, k as f64));
    assert!(d[1..].iter().all(|x| (x.lo, x.hi) == (0.0, 1.0)));
}

#[test]
fn condition_rules_are_enforced() {
    let top = top_model(4, 2, 0);
    let bottom = bottom_model(4, 4, 0);
    let err = sample_level(&bottom, None, &mut SampleRng::new(0, 0, 0), 1.0).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let t = sample_level(&top, None, &mut SampleRng::new(0, 0, 0), 1.0).unwrap();
    assert!(matches!(sample_level(&top, Some(&t), &mut SampleRng::new(0, 0, 0), 1.0), Err(Error::Config(_))));
}

#[test]
fn bottom_distribution_depends_on_the_top_map() {
    let (k, side) = (6, 4);
    let mut bottom = bottom_model(k, side, 5);
    // sharpen the random model so conditional differences are visible
    let names: Vec<String> = bottom.params.iter().map(|(n, _)| n.clone()).collect();
    for n in names {
        bottom.params.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v *= 2.0);
    }
    let a = LatentMap::new(Level::Top, 2, vec![0, 1, 2, 3]).unwrap();
    let b = LatentMap::new(Level::Top, 2, vec![5, 5, 4, 4]).unwrap();
    let draws = 300;
    let pos = 5;
    let mut hist = [vec![0f64; k], vec![0f64; k]];
    for (h, cond) in hist.iter_mut().zip([&a, &b]) {
        let conds = vec![cond.clone(); draws];
        let mut rngs: Vec<_> = (0..draws as u64).map(|i| SampleRng::new(77, 0, i)).collect();
        let (maps, _) = sample_level_traced(&bottom, Some(&conds), &mut rngs, 1.0).unwrap();
        for m in maps {
            h[m.values[pos]] += 1.0;
        }
    }
    // two-sample chi-square over the position's categories
    let mut chi2 = 0.0;
    let mut dof = 0;
    for c in 0..k {
        let total = hist[0][c] + hist[1][c];
        if total > 0.0 {
            let e = total / 2.0;
            chi2 += (hist[0][c] - e).powi(2) / e + (hist[1][c] - e).powi(2) / e;
            dof += 1;
        }
    }
    // 0.001 critical value for 5 degrees of freedom
    assert!(dof >= 2 && chi2 > 20.515, "chi2 {chi2} {hist:?}");
}

fn desk_models() -> (VqVae, PriorModel, PriorModel) {
    let cfg = VqConfig {
        resolution: 16,
        hidden: 8,
        res_blocks: 1,
        codebook_size: 8,
        code_dim: 4,
        bottom_grid: 4,
        ..VqConfig::default()
    };
    let vq = VqVae::new(cfg, 1).unwrap();
    (vq, top_model(8, 2, 2), bottom_model(8, 4, 3))
}

#[test]
fn generated_images_are_seeded_and_chunk_independent() {
    let (vq, top, bottom) = desk_models();
    let eight = generate_images(&vq, &top, &bottom, &SamplerRequest::new(8, 4)).unwrap();
    assert_eq!(eight.len(), 8);
    for img in &eight {
        assert_eq!(img.dims(), (16, 16, 3));
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let again = generate_images(&vq, &top, &bottom, &SamplerRequest::new(8, 4)).unwrap();
    assert_eq!(eight, again);
    let many = generate_latents(&top, &bottom, &SamplerRequest::new(60, 4)).unwrap();
    let few = generate_latents(&top, &bottom, &SamplerRequest::new(8, 4)).unwrap();
    assert_eq!(&many[..8], &few[..]);
    let other = generate_latents(&top, &bottom, &SamplerRequest::new(8, 5)).unwrap();
    assert_ne!(few, other);
}

#[test]
fn incompatible_checkpoints_are_rejected() {
    let (vq, top, _) = desk_models();
    let wrong = bottom_model(6, 4, 0);
    assert!(matches!(generate_images(&vq, &top, &wrong, &SamplerRequest::new(1, 0)), Err(Error::Config(_))));
    assert!(generate_images(&vq, &top, &bottom_model(8, 4, 0), &SamplerRequest::new(0, 0)).is_err());
}

#[test]
fn evaluation_scale_generation_completes() {
    let (vq, top, bottom) = desk_models();
    let images = generate_images(&vq, &top, &bottom, &SamplerRequest::new(5000, 1)).unwrap();
    assert_eq!(images.len(), 5000);
    assert!(images.iter().all(|img| img.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))));
}
