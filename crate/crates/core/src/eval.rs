//! Fréchet distance between Gaussian fits of image features.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::augment::upscale_center_crop;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::{self, ParamStore};
use crate::pixelcnn::PriorModel;
use crate::rng;
use crate::sample::{generate_images, SamplerRequest};
use crate::tensor::Graph;
use crate::vqvae::VqVae;

/// Feature widths of the three extractor layers; the last one is `F`.
pub const EXTRACTOR_WIDTHS: [usize; 3] = [16, 32, 64];
/// Images are pushed through the extractor this many at a time.
const EXTRACT_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub n: usize,
    pub mu: DVector<f64>,
    /// Unbiased (`n - 1`) covariance.
    pub sigma: DMatrix<f64>,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Single-pass mean and co-moment accumulation over feature rows, in order.
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::InsufficientSamples {
                needed: 2,
                got: rows.len(),
            });
        }
        let f = rows[0].len();
        if rows.iter().any(|r| r.len() != f) {
            return Err(Error::Shape("feature rows differ in length".into()));
        }
        let mut mean = DVector::<f64>::zeros(f);
        let mut comoment = DMatrix::<f64>::zeros(f, f);
        for (i, row) in rows.iter().enumerate() {
            let x = DVector::from_column_slice(row);
            let before = &x - &mean;
            mean += &before / (i + 1) as f64;
            let after = &x - &mean;
            comoment += &before * after.transpose();
        }
        let mut sigma = comoment / (rows.len() - 1) as f64;
        // the rank-one updates are symmetric only up to rounding
        let sym = (&sigma + sigma.transpose()) * 0.5;
        sigma.copy_from(&sym);
        Ok(Self {
            n: rows.len(),
            mu: mean,
            sigma,
        })
    }
}

/// Deterministic image-to-vector map used for the distance.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    descriptor: String,
    params: ParamStore,
}

impl FeatureExtractor {
    /// Random conv stack with fixed seed-derived weights.
    pub fn fixed(seed: u64, channels: usize) -> Self {
        let mut r = rng::stream(seed, "extractor", &[]);
        let mut params = ParamStore::new();
        let mut cin = channels;
        for (i, &w) in EXTRACTOR_WIDTHS.iter().enumerate() {
            params.add_conv(&format!("conv{i}"), w, cin, 3, 3, &mut r);
            cin = w;
        }
        Self {
            descriptor: format!("fixed:{seed}"),
            params,
        }
    }

    /// Weights from a checkpoint holding `extractor.conv{0,1,2}.{w,b}`.
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let mut params = ParamStore::new();
        for (name, t) in &ck.tensors {
            if let Some(rest) = name.strip_prefix("extractor.") {
                params.insert(rest, t.clone());
            }
        }
        for i in 0..EXTRACTOR_WIDTHS.len() {
            for part in ["w", "b"] {
                params.get(&format!("conv{i}.{part}"))?;
            }
        }
        if params.len() != 2 * EXTRACTOR_WIDTHS.len() {
            return Err(Error::Format(format!("extractor file {} has unexpected tensors", path.display())));
        }
        Ok(Self {
            descriptor: format!("file:{}", path.display()),
            params,
        })
    }

    /// `fixed:<seed>` or `file:<path>`.
    pub fn from_spec(spec: &str, channels: usize) -> Result<Self> {
        if let Some(seed) = spec.strip_prefix("fixed:") {
            let seed = seed
                .parse()
                .map_err(|_| Error::Config(format!("bad extractor seed in '{spec}'")))?;
            Ok(Self::fixed(seed, channels))
        } else if let Some(path) = spec.strip_prefix("file:") {
            Self::from_checkpoint(&PathBuf::from(path))
        } else {
            Err(Error::Config(format!("unknown feature extractor '{spec}' (fixed:<seed>|file:<path>)")))
        }
    }

    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    /// Exports the weights in the `file:` format.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.meta.insert("kind".into(), "extractor".into());
        for (k, v) in self.params.prefixed("extractor") {
            ck.insert(k, v.clone());
        }
        ck
    }

    /// One feature row per image.
    pub fn features(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        let Some(first) = images.first() else {
            return Ok(Vec::new());
        };
        let dims = first.dims();
        if images.iter().any(|i| i.dims() != dims) {
            return Err(Error::Shape("feature extraction needs a uniform resolution".into()));
        }
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EXTRACT_CHUNK) {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false)?;
            let mut h = g.constant(ImageTensor::stack_nchw(chunk)?)?;
            for i in 0..EXTRACTOR_WIDTHS.len() {
                h = nn::conv_same(&mut g, &p, &format!("conv{i}"), h)?;
                h = g.relu(h)?;
                h = g.avg_pool2(h)?;
            }
            let pooled = g.mean_spatial(h)?;
            let t = g.value(pooled);
            let f = t.len() / chunk.len();
            out.extend(t.data().chunks(f).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

pub fn extract_stats(images: &[ImageTensor], extractor: &FeatureExtractor) -> Result<FeatureStats> {
    if images.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: images.len(),
        });
    }
    FeatureStats::from_features(&extractor.features(images)?)
}

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if !m.is_square() || asym > 1e-9 * scale || m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("{what} covariance is not a finite symmetric matrix")));
    }
    Ok(())
}

/// Square root of a symmetric positive semi-definite matrix; negative
/// eigenvalues from rounding are clamped to zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, never negative.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() || a.sigma.nrows() != a.dim() || b.sigma.nrows() != b.dim() {
        return Err(Error::Shape(format!("feature dims {} vs {}", a.dim(), b.dim())));
    }
    check_symmetric(&a.sigma, "first")?;
    check_symmetric(&b.sigma, "second")?;
    let diff = (&a.mu - &b.mu).norm_squared();
    let ra = sqrt_psd(&a.sigma);
    let inner = &ra * &b.sigma * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let d = diff + a.sigma.trace() + b.sigma.trace() - 2.0 * tr_cross;
    if !d.is_finite() {
        return Err(Error::Numeric(format!("Fréchet distance is {d}")));
    }
    Ok(d.max(0.0))
}

/// Flat `key = value` evaluation summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub score: f64,
    pub n_real: usize,
    pub n_generated: usize,
    pub extractor: String,
    pub extra: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "score = {}", self.score);
        let _ = writeln!(s, "n_real = {}", self.n_real);
        let _ = writeln!(s, "n_generated = {}", self.n_generated);
        let _ = writeln!(s, "extractor = {}", self.extractor);
        for (k, v) in &self.extra {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Format(format!("bad report line '{line}'")))?;
            map.insert(k.to_string(), v.to_string());
        }
        let mut take = |k: &str| map.remove(k).ok_or_else(|| Error::Format(format!("report lacks '{k}'")));
        fn num<T: std::str::FromStr>(k: &str, v: String) -> Result<T> {
            v.parse().map_err(|_| Error::Format(format!("bad '{k}' value '{v}'")))
        }
        let score: f64 = num("score", take("score")?)?;
        let n_real: usize = num("n_real", take("n_real")?)?;
        let n_generated: usize = num("n_generated", take("n_generated")?)?;
        let extractor = take("extractor")?;
        Ok(Self {
            score,
            n_real,
            n_generated,
            extractor,
            extra: map,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Real images get the same constant upscale and center crop used in
/// training before feature extraction.
pub fn preprocess_real(images: &[ImageTensor]) -> Result<Vec<ImageTensor>> {
    images.iter().map(upscale_center_crop).collect()
}

/// Distance between preprocessed real images and an already generated set.
pub fn score_sets(real: &[ImageTensor], generated: &[ImageTensor], extractor: &FeatureExtractor) -> Result<EvalReport> {
    if real.is_empty() {
        return Err(Error::EmptyDataset("no real images to evaluate against".into()));
    }
    let real_stats = extract_stats(&preprocess_real(real)?, extractor)?;
    let gen_stats = extract_stats(generated, extractor)?;
    Ok(EvalReport {
        score: frechet_distance(&real_stats, &gen_stats)?,
        n_real: real.len(),
        n_generated: generated.len(),
        extractor: extractor.descriptor().to_string(),
        extra: BTreeMap::new(),
    })
}

/// Generates `req.count` samples and scores them against `real`.
pub fn evaluate(
    vq: &VqVae,
    top: &PriorModel,
    bottom: &PriorModel,
    real: &[ImageTensor],
    req: &SamplerRequest,
    extractor: &FeatureExtractor,
) -> Result<EvalReport> {
    if real.is_empty() {
        return Err(Error::EmptyDataset("no real images to evaluate against".into()));
    }
    let generated = generate_images(vq, top, bottom, req)?;
    let mut report = score_sets(real, &generated, extractor)?;
    report.extra.insert("seed".into(), req.seed.to_string());
    report.extra.insert("temperature".into(), req.temperature.to_string());
    Ok(report)
}
