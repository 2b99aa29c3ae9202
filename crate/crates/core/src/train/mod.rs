//! Training loops for the autoencoder and both priors.

mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

pub use config::TrainConfig;

use crate::augment::{self, AugMode, PhasePolicy};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::pixelcnn::{PriorConfig, PriorModel};
use crate::rng::{self, SampleRng};
use crate::tensor::{AdamConfig, AdamState, Graph, Optimizer, Tensor};
use crate::vqvae::{LatentMap, Level, VqConfig, VqVae};

/// `base_lr / lr_factors[phase - 1]` for phases `1..=6`.
pub fn lr_for_phase(cfg: &TrainConfig, phase: usize) -> Result<f64> {
    if !(1..=cfg.lr_factors.len()).contains(&phase) {
        return Err(Error::Range(format!("phase {phase} outside 1..={}", cfg.lr_factors.len())));
    }
    Ok(cfg.base_lr / cfg.lr_factors[phase - 1])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub phase: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("iteration,phase,lr,loss\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.iteration, r.phase, r.lr, r.loss);
    }
    s
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    /// Iterations at which the optimizer state was rebuilt.
    pub resets: Vec<u64>,
    /// Adam step counter after each iteration's update.
    pub adam_steps: Vec<u64>,
}

/// Augmented training batch for one iteration. Images are drawn with
/// replacement; every sample owns its own random stream.
pub fn augmented_batch(
    dataset: &[ImageTensor],
    policy: &PhasePolicy,
    batch_size: usize,
    seed: u64,
    iteration: u64,
) -> Result<Vec<ImageTensor>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("no training images".into()));
    }
    (0..batch_size as u64)
        .map(|i| {
            let pick = rng::stream(seed, "batch", &[iteration, i]).random_range(0..dataset.len());
            let mut r = SampleRng::new(seed, iteration, i);
            augment::apply(&dataset[pick], policy, &mut r)
        })
        .collect()
}

fn check_dataset(dataset: &[ImageTensor], vq: &VqConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("no training images".into()));
    }
    for img in dataset {
        if img.dims() != (vq.resolution, vq.resolution, vq.channels) {
            return Err(Error::Shape(format!(
                "image {:?} does not match configured {r}x{r}x{}",
                img.dims(),
                vq.channels,
                r = vq.resolution
            )));
        }
    }
    Ok(())
}

fn optimizer_tensors(opt: &Optimizer) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (name, st) in &opt.states {
        out.push((format!("adam.{name}.m"), st.m.clone()));
        out.push((format!("adam.{name}.v"), st.v.clone()));
        out.push((format!("adam.{name}.step"), Tensor::scalar(st.step as f64)));
    }
    out
}

/// Rebuilds optimizer moments saved by a training checkpoint.
pub fn restore_optimizer(ck: &Checkpoint, lr: f64) -> Result<Optimizer> {
    let mut opt = Optimizer::new(AdamConfig {
        lr,
        ..AdamConfig::default()
    });
    for (name, m) in &ck.tensors {
        let Some(param) = name.strip_prefix("adam.").and_then(|n| n.strip_suffix(".m")) else {
            continue;
        };
        let v = ck.tensor(&format!("adam.{param}.v"))?;
        let step = ck.tensor(&format!("adam.{param}.step"))?.item() as u64;
        let mut st = AdamState::new(m.dims(), opt.config);
        st.m = m.clone();
        st.v = v.clone();
        st.step = step;
        opt.states.insert(param.to_string(), st);
    }
    Ok(opt)
}

fn base_checkpoint(kind: &str, cfg: &TrainConfig, iteration: u64, phase: usize) -> Checkpoint {
    let mut ck = Checkpoint {
        iteration,
        phase: phase as u32,
        rng_state: cfg.seed,
        ..Default::default()
    };
    ck.meta.insert("kind".into(), kind.into());
    ck.meta.insert("config".into(), cfg.to_ini_string());
    ck
}

pub fn vqvae_checkpoint(model: &VqVae, opt: &Optimizer, cfg: &TrainConfig, iteration: u64) -> Checkpoint {
    let mut ck = base_checkpoint("vqvae", cfg, iteration, 1);
    ck.meta.extend(model.config.to_meta());
    ck.tensors.extend(model.named_tensors());
    ck.tensors.extend(optimizer_tensors(opt));
    ck
}

pub fn load_vqvae(ck: &Checkpoint) -> Result<VqVae> {
    expect_kind(ck, "vqvae")?;
    let config = VqConfig::from_meta(&ck.meta)?;
    VqVae::from_named_tensors(config, &ck.tensors)
}

pub fn prior_checkpoint(
    model: &PriorModel,
    opt: &Optimizer,
    cfg: &TrainConfig,
    iteration: u64,
    phase: usize,
) -> Checkpoint {
    let mut ck = base_checkpoint("prior", cfg, iteration, phase);
    ck.meta.insert("aug_mode".into(), cfg.aug_mode.to_string());
    ck.meta.extend(model.config.to_meta());
    ck.tensors.extend(model.named_tensors());
    ck.tensors.extend(optimizer_tensors(opt));
    ck
}

pub fn load_prior(ck: &Checkpoint) -> Result<PriorModel> {
    expect_kind(ck, "prior")?;
    let config = PriorConfig::from_meta(&ck.meta)?;
    PriorModel::from_named_tensors(config, &ck.tensors)
}

fn expect_kind(ck: &Checkpoint, kind: &str) -> Result<()> {
    match ck.meta_str("kind")? {
        k if k == kind => Ok(()),
        other => Err(Error::Config(format!("expected a {kind} checkpoint, found '{other}'"))),
    }
}

fn diverged(err: Error, iteration: u64, checkpoint: Checkpoint) -> Error {
    match err {
        Error::Numeric(reason) => Error::Diverged {
            iteration,
            reason,
            checkpoint: Box::new(checkpoint),
        },
        other => other,
    }
}

/// Trains the autoencoder under the fixed standard policy at the base rate.
pub fn train_vqvae(dataset: &[ImageTensor], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(dataset, &cfg.vq)?;
    let policy = AugMode::Standard.fixed_policy().expect("standard mode has a fixed policy");
    let seed = rng::derive_seed(cfg.seed, "vqvae", &[]);
    let mut model = VqVae::new(cfg.vq.clone(), cfg.seed)?;
    let mut opt = Optimizer::new(AdamConfig {
        lr: cfg.base_lr,
        ..AdamConfig::default()
    });
    let total = cfg.vqvae_iteration_count();
    let mut metrics = Vec::with_capacity(total as usize);
    let mut adam_steps = Vec::with_capacity(total as usize);
    for it in 0..total {
        let mut step = || -> Result<f64> {
            let batch = augmented_batch(dataset, &policy, cfg.batch_size, seed, it)?;
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true)?;
            let x = g.constant(ImageTensor::stack_nchw(&batch)?)?;
            let fwd = model.forward(&mut g, &p, x, None)?;
            let loss = model.loss(&mut g, x, &fwd)?;
            let value = g.value(loss.total).item();
            let grads = g.backward(loss.total)?;
            model.params.apply_gradients(&p, &grads, &mut opt, cfg.grad_clip)?;
            model.update_codebooks(&g, &fwd)?;
            Ok(value)
        };
        let loss = match step() {
            Ok(l) => l,
            Err(e) => return Err(diverged(e, it, vqvae_checkpoint(&model, &opt, cfg, it))),
        };
        metrics.push(MetricsRow {
            iteration: it,
            phase: 1,
            lr: cfg.base_lr,
            loss,
        });
        adam_steps.push(opt.step_count());
    }
    Ok(TrainOutcome {
        checkpoint: vqvae_checkpoint(&model, &opt, cfg, total),
        metrics,
        resets: Vec::new(),
        adam_steps,
    })
}

/// Splits encoded pairs into top and bottom batches.
fn split_levels(pairs: Vec<(LatentMap, LatentMap)>) -> (Vec<LatentMap>, Vec<LatentMap>) {
    pairs.into_iter().unzip()
}

/// Trains one prior on latents of the frozen autoencoder. In phased mode the
/// optimizer is rebuilt at every phase boundary with that phase's rate.
pub fn train_prior(level: Level, dataset: &[ImageTensor], vq: &VqVae, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.vq = vq.config.clone();
    cfg.validate()?;
    check_dataset(dataset, &cfg.vq)?;
    let schedule = cfg.schedule()?;
    let total = cfg.prior_iteration_count()?;
    let level_code = match level {
        Level::Top => 0,
        Level::Bottom => 1,
    };
    let mut model = PriorModel::new(
        cfg.prior_config(level),
        rng::derive_seed(cfg.seed, "prior.init", &[level_code]),
    )?;
    let aug_seed = rng::derive_seed(cfg.seed, "prior", &[]);
    let mut opt = Optimizer::new(AdamConfig {
        lr: lr_for_phase(&cfg, 1)?,
        ..AdamConfig::default()
    });
    let mut phase = 1;
    let mut resets = Vec::new();
    let mut metrics = Vec::with_capacity(total as usize);
    let mut adam_steps = Vec::with_capacity(total as usize);
    for it in 0..total {
        let (p_now, policy) = match cfg.aug_mode.fixed_policy() {
            Some(fixed) => (1, fixed),
            None => schedule.policy_for_iteration(it)?,
        };
        if p_now < phase {
            return Err(Error::Config(format!("phase went backwards at iteration {it}")));
        }
        if p_now != phase {
            phase = p_now;
            opt.reset(lr_for_phase(&cfg, phase)?);
            resets.push(it);
        }
        let lr = opt.config.lr;
        let mut step = || -> Result<f64> {
            let batch = augmented_batch(dataset, &policy, cfg.batch_size, aug_seed, it)?;
            let (tops, bottoms) = split_levels(vq.encode_batch(&batch)?);
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true)?;
            let mut drop = rng::stream(cfg.seed, "dropout", &[level_code, it]);
            let loss = match level {
                Level::Top => model.nll_loss(&mut g, &p, &tops, None, Some(&mut drop))?,
                Level::Bottom => model.nll_loss(&mut g, &p, &bottoms, Some(&tops), Some(&mut drop))?,
            };
            let value = g.value(loss).item();
            let grads = g.backward(loss)?;
            model.params.apply_gradients(&p, &grads, &mut opt, cfg.grad_clip)?;
            Ok(value)
        };
        let loss = match step() {
            Ok(l) => l,
            Err(e) => return Err(diverged(e, it, prior_checkpoint(&model, &opt, &cfg, it, phase))),
        };
        metrics.push(MetricsRow {
            iteration: it,
            phase,
            lr,
            loss,
        });
        adam_steps.push(opt.step_count());
    }
    Ok(TrainOutcome {
        checkpoint: prior_checkpoint(&model, &opt, &cfg, total, phase),
        metrics,
        resets,
        adam_steps,
    })
}

/// Checks that two models were trained against the same autoencoder layout.
pub fn check_compatible(vq: &VqVae, top: &PriorModel, bottom: &PriorModel) -> Result<()> {
    let v = &vq.config;
    let want_top = (Level::Top, v.codebook_size, v.top_grid(), None);
    let want_bottom = (
        Level::Bottom,
        v.codebook_size,
        v.bottom_grid,
        Some((v.codebook_size, v.top_grid())),
    );
    let got = |c: &PriorConfig| (c.level, c.vocab, c.side, c.cond);
    if got(&top.config) != want_top || got(&bottom.config) != want_bottom {
        return Err(Error::Config(format!(
            "prior checkpoints do not match the autoencoder (K={}, grids {}/{})",
            v.codebook_size,
            v.top_grid(),
            v.bottom_grid
        )));
    }
    Ok(())
}

/// Parses the config embedded in a checkpoint.
pub fn embedded_config(ck: &Checkpoint) -> Result<TrainConfig> {
    TrainConfig::from_ini_str(ck.meta_str("config")?)
}

/// Summary of a parameter set, mostly for logs.
pub fn param_summary(tensors: &BTreeMap<String, Tensor>) -> (usize, usize) {
    (tensors.len(), tensors.values().map(Tensor::len).sum())
}
