mod run_config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use pcvq::augment::{self, default_phase_policies, AugMode, PhaseSchedule};
use pcvq::checkpoint::Checkpoint;
use pcvq::data::{self, DatasetManifest, Subset};
use pcvq::eval::{self, FeatureExtractor};
use pcvq::gradsuite;
use pcvq::image::ImageTensor;
use pcvq::rng::SampleRng;
use pcvq::sample::{generate_images, SamplerRequest};
use pcvq::train::{self, TrainOutcome};
use pcvq::vqvae::Level;
use pcvq::Error;

use run_config::RunConfig;

#[derive(Parser)]
#[command(name = "pcvq", version, about = "Hierarchical VQ autoencoder with autoregressive priors and phased augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct TrainFlags {
    /// Config file (INI style).
    #[arg(long)]
    config: PathBuf,
    /// Image folder; overrides [paths] data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Listing positions to use, `a-b` or `i,j,k`.
    #[arg(long)]
    subset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Multiplies every iteration count.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the two-level autoencoder.
    TrainVqvae {
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Train the top or bottom prior on latents of a trained autoencoder.
    TrainPrior {
        #[command(flatten)]
        flags: TrainFlags,
        /// Autoencoder checkpoint; overrides [paths] vqvae.
        #[arg(long)]
        vqvae: Option<PathBuf>,
        #[arg(long)]
        level: Option<Level>,
        /// phased | standard | none
        #[arg(long)]
        aug: Option<AugMode>,
    },
    /// Generate images from trained checkpoints.
    Sample {
        #[arg(long)]
        vqvae: PathBuf,
        #[arg(long)]
        top: PathBuf,
        #[arg(long)]
        bottom: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fréchet distance between generated samples and real images.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        subset: Option<String>,
        #[arg(long)]
        vqvae: PathBuf,
        #[arg(long)]
        top: PathBuf,
        #[arg(long)]
        bottom: PathBuf,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// fixed:<seed> | file:<path>
        #[arg(long, default_value = "fixed:0")]
        features: String,
        /// Report file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one augmented copy of an image.
    AugmentPreview {
        #[arg(long)]
        input: PathBuf,
        /// Training iteration whose policy is used (phased mode).
        #[arg(long, default_value_t = 0)]
        iteration: u64,
        /// phased | standard | none
        #[arg(long, alias = "aug", default_value = "phased")]
        mode: AugMode,
        /// Use this phase's policy (1-6) regardless of --mode and --iteration.
        #[arg(long)]
        phase: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sample index within the iteration's batch.
        #[arg(long, default_value_t = 0)]
        index: u64,
        /// Output PNG.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = gradsuite::DEFAULT_EPS)]
        eps: f64,
    },
    /// Write a seeded corpus of synthetic shape images.
    SynthCorpus {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(flags: &TrainFlags) -> Result<RunConfig> {
    let mut rc = RunConfig::load(&flags.config)?;
    if let Some(d) = &flags.data {
        rc.data = Some(d.clone());
    }
    if let Some(s) = &flags.subset {
        rc.subset = Some(s.clone());
    }
    if let Some(s) = flags.seed {
        rc.train.seed = s;
    }
    if let Some(s) = flags.scale {
        rc.train.scale = s;
    }
    if let Some(b) = flags.batch_size {
        rc.train.batch_size = b;
    }
    if let Some(r) = flags.resolution {
        rc.train.vq.resolution = r;
    }
    Ok(rc)
}

fn load_images(dir: &Path, subset: Option<&str>, resolution: usize) -> Result<(DatasetManifest, Vec<ImageTensor>)> {
    let subset = subset.map(str::parse::<Subset>).transpose()?;
    let manifest = DatasetManifest::from_dir(dir, resolution, subset.as_ref())?;
    let images = data::load_dataset(&manifest)?;
    Ok((manifest, images))
}

fn load_training_data(rc: &RunConfig) -> Result<(DatasetManifest, Vec<ImageTensor>)> {
    let Some(dir) = &rc.data else {
        bail!("no image folder given (use --data or [paths] data)");
    };
    load_images(dir, rc.subset.as_deref(), rc.train.vq.resolution)
}

/// Creates `out` and records what the run was started with.
fn prepare_out(out: &Path, rc: &RunConfig, audit: &str, manifest: &DatasetManifest) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    rc.write_audit(&out.join(audit))?;
    manifest.save(&out.join("manifest.txt"))?;
    Ok(())
}

/// Saves the diagnostic checkpoint of a diverged run before reporting it.
fn finish(result: pcvq::Result<TrainOutcome>, out: &Path, stem: &str) -> Result<()> {
    match result {
        Ok(o) => {
            o.checkpoint.save(out.join(format!("{stem}.ckpt")))?;
            let metrics = if stem == "vqvae" { "metrics.csv".to_string() } else { format!("metrics_{}.csv", &stem[6..]) };
            train::write_metrics(&out.join(metrics), &o.metrics)?;
            println!(
                "{stem}: {} iterations, final loss {:.6}",
                o.metrics.len(),
                o.metrics.last().map_or(f64::NAN, |r| r.loss)
            );
            Ok(())
        }
        Err(Error::Diverged {
            iteration,
            reason,
            checkpoint,
        }) => {
            let path = out.join(format!("{stem}_diagnostic.ckpt"));
            checkpoint.save(&path)?;
            bail!(
                "training diverged at iteration {iteration} ({reason}); diagnostic checkpoint at {}",
                path.display()
            )
        }
        Err(e) => Err(e.into()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainVqvae { flags } => {
            let rc = resolve(&flags)?;
            rc.train.validate()?;
            let (manifest, images) = load_training_data(&rc)?;
            prepare_out(&flags.out, &rc, "config.ini", &manifest)?;
            finish(train::train_vqvae(&images, &rc.train), &flags.out, "vqvae")
        }
        Command::TrainPrior {
            flags,
            vqvae,
            level,
            aug,
        } => {
            let mut rc = resolve(&flags)?;
            if let Some(v) = vqvae {
                rc.vqvae = Some(v);
            }
            if let Some(l) = level {
                rc.level = Some(l);
            }
            if let Some(a) = aug {
                rc.train.aug_mode = a;
            }
            let Some(level) = rc.level else {
                bail!("no prior level given (use --level or [prior] level)");
            };
            let Some(vq_path) = rc.vqvae.clone() else {
                bail!("no autoencoder checkpoint given (use --vqvae or [paths] vqvae)");
            };
            let vq = train::load_vqvae(&Checkpoint::load(&vq_path).with_context(|| format!("loading {}", vq_path.display()))?)?;
            rc.train.vq = vq.config.clone();
            rc.train.validate()?;
            let (manifest, images) = load_training_data(&rc)?;
            prepare_out(&flags.out, &rc, &format!("config_{level}.ini"), &manifest)?;
            finish(train::train_prior(level, &images, &vq, &rc.train), &flags.out, &format!("prior_{level}"))
        }
        Command::Sample {
            vqvae,
            top,
            bottom,
            n,
            seed,
            temperature,
            out,
        } => {
            let (vq, top_m, bottom_m) = load_models(&vqvae, &top, &bottom)?;
            let req = SamplerRequest { count: n, seed, temperature };
            let images = generate_images(&vq, &top_m, &bottom_m, &req)?;
            fs::create_dir_all(&out)?;
            let seed_s = seed.to_string();
            for (i, img) in images.iter().enumerate() {
                let idx = i.to_string();
                img.save_png(&out.join(format!("sample_{i:04}.png")), &[("seed", &seed_s), ("index", &idx)])?;
            }
            fs::write(
                out.join("run.ini"),
                format!(
                    "vqvae = {}\ntop = {}\nbottom = {}\nn = {n}\nseed = {seed}\ntemperature = {temperature}\n",
                    vqvae.display(),
                    top.display(),
                    bottom.display()
                ),
            )?;
            println!("wrote {} samples to {}", images.len(), out.display());
            Ok(())
        }
        Command::Eval {
            real,
            subset,
            vqvae,
            top,
            bottom,
            n,
            seed,
            temperature,
            features,
            out,
        } => {
            let (vq, top_m, bottom_m) = load_models(&vqvae, &top, &bottom)?;
            let (_, real_images) = load_images(&real, subset.as_deref(), vq.config.resolution)?;
            let extractor = FeatureExtractor::from_spec(&features, vq.config.channels)?;
            let req = SamplerRequest { count: n, seed, temperature };
            let mut report = eval::evaluate(&vq, &top_m, &bottom_m, &real_images, &req, &extractor)?;
            for (k, v) in [
                ("real", real.display().to_string()),
                ("subset", subset.unwrap_or_else(|| "all".into())),
                ("vqvae", vqvae.display().to_string()),
                ("top", top.display().to_string()),
                ("bottom", bottom.display().to_string()),
            ] {
                report.extra.insert(k.into(), v);
            }
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            report.save(&out)?;
            println!("score = {}", report.score);
            Ok(())
        }
        Command::AugmentPreview {
            input,
            iteration,
            mode,
            phase,
            scale,
            seed,
            index,
            out,
        } => {
            let img = ImageTensor::load_png(&input).with_context(|| format!("reading {}", input.display()))?;
            let (phase, policy) = match (phase, mode.fixed_policy()) {
                (Some(p), _) => {
                    if !(1..=6).contains(&p) {
                        bail!("phase {p} outside 1..=6");
                    }
                    (p, default_phase_policies()[p - 1])
                }
                (None, Some(fixed)) => (1, fixed),
                (None, None) => PhaseSchedule::phased(scale)?.policy_for_iteration(iteration)?,
            };
            let mut r = SampleRng::new(seed, iteration, index);
            let aug = augment::apply(&img, &policy, &mut r)?;
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let (it, ph) = (iteration.to_string(), phase.to_string());
            aug.save_png(&out, &[("iteration", &it), ("phase", &ph)])?;
            println!("phase {phase}: {policy:?}");
            Ok(())
        }
        Command::Gradcheck { instances, seed, eps } => {
            let reports = gradsuite::run_suite(seed, instances, eps)?;
            let mut failed = Vec::new();
            for r in &reports {
                println!("{:<22} {:.3e} ({} instances)", r.op, r.max_error, r.instances);
                if !r.passed() {
                    failed.push(r.op);
                }
            }
            if !failed.is_empty() {
                bail!("gradient check failed for: {}", failed.join(", "));
            }
            Ok(())
        }
        Command::SynthCorpus { n, resolution, seed, out } => {
            let paths = data::write_synthetic_corpus(&out, n, resolution, seed)?;
            println!("wrote {} images to {}", paths.len(), out.display());
            Ok(())
        }
    }
}

fn load_models(vqvae: &Path, top: &Path, bottom: &Path) -> Result<(pcvq::vqvae::VqVae, pcvq::pixelcnn::PriorModel, pcvq::pixelcnn::PriorModel)> {
    let load = |p: &Path| Checkpoint::load(p).with_context(|| format!("loading {}", p.display()));
    let vq = train::load_vqvae(&load(vqvae)?)?;
    let t = train::load_prior(&load(top)?)?;
    let b = train::load_prior(&load(bottom)?)?;
    train::check_compatible(&vq, &t, &b)?;
    Ok((vq, t, b))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
