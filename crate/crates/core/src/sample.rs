//! Hierarchical ancestral sampling: top grid first, then the bottom grid
//! conditioned on it, then decoding to pixels.

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::pixelcnn::PriorModel;
use crate::rng::{self, SampleRng};
use crate::tensor::Graph;
use crate::train::check_compatible;
use crate::vqvae::{LatentMap, Level, VqVae};

/// Anything that maps a batch of (partially filled) grids to `[N, K, T, T]`
/// logits in eval mode.
pub trait LogitModel {
    fn level(&self) -> Level;
    fn vocab(&self) -> usize;
    fn side(&self) -> usize;
    fn needs_condition(&self) -> bool;
    fn logits(&self, maps: &[LatentMap], cond: Option<&[LatentMap]>) -> Result<Vec<f64>>;
}

impl LogitModel for PriorModel {
    fn level(&self) -> Level {
        self.config.level
    }

    fn vocab(&self) -> usize {
        self.config.vocab
    }

    fn side(&self) -> usize {
        self.config.side
    }

    fn needs_condition(&self) -> bool {
        self.config.cond.is_some()
    }

    fn logits(&self, maps: &[LatentMap], cond: Option<&[LatentMap]>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false)?;
        let y = self.forward_logits(&mut g, &p, maps, cond, None)?;
        Ok(g.value(y).data().to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerRequest {
    pub count: usize,
    pub seed: u64,
    pub temperature: f64,
}

impl SamplerRequest {
    pub fn new(count: usize, seed: u64) -> Self {
        Self {
            count,
            seed,
            temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// Softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&l| ((l - m) / temperature).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

/// Inverse-CDF draw from `probs` with a single uniform `u` in `[0, 1)`.
pub fn categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the total mass: take the last nonzero entry
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Samples one grid per stream in `rngs`, filling positions in raster order.
/// Position 0 is uniform over the vocabulary; each later position costs one
/// uniform draw. Returns the grids and, for every grid, the distribution each
/// position was drawn from.
pub fn sample_level_traced<M: LogitModel + ?Sized>(
    model: &M,
    cond: Option<&[LatentMap]>,
    rngs: &mut [SampleRng],
    temperature: f64,
) -> Result<(Vec<LatentMap>, Vec<Vec<Vec<f64>>>)> {
    let n = rngs.len();
    match (model.needs_condition(), cond) {
        (true, None) => return Err(Error::Config("bottom sampling requires a top condition".into())),
        (false, Some(_)) => return Err(Error::Config("top sampling takes no condition".into())),
        (_, Some(c)) if c.len() != n => {
            return Err(Error::Shape(format!("{} conditions for {n} samples", c.len())));
        }
        _ => {}
    }
    let (k, t) = (model.vocab(), model.side());
    let l = t * t;
    let mut maps: Vec<LatentMap> = (0..n)
        .map(|_| LatentMap::new(model.level(), t, vec![0; l]))
        .collect::<Result<_>>()?;
    let mut trace = vec![Vec::with_capacity(l); n];
    for (i, r) in rngs.iter_mut().enumerate() {
        maps[i].values[0] = r.uniform_index(k);
        trace[i].push(vec![1.0 / k as f64; k]);
    }
    for pos in 1..l {
        let logits = model.logits(&maps, cond)?;
        for (i, r) in rngs.iter_mut().enumerate() {
            let row: Vec<f64> = (0..k).map(|c| logits[(i * k + c) * l + pos]).collect();
            let probs = softmax(&row, temperature);
            maps[i].values[pos] = categorical(&probs, r.uniform(0.0, 1.0));
            trace[i].push(probs);
        }
    }
    Ok((maps, trace))
}

pub fn sample_level<M: LogitModel + ?Sized>(
    model: &M,
    cond: Option<&LatentMap>,
    rng: &mut SampleRng,
    temperature: f64,
) -> Result<LatentMap> {
    let cond = cond.map(std::slice::from_ref);
    let (mut maps, _) = sample_level_traced(model, cond, std::slice::from_mut(rng), temperature)?;
    Ok(maps.remove(0))
}

/// Images are sampled in groups of this many; results do not depend on it.
const SAMPLE_CHUNK: usize = 50;

/// Latent pairs for `req.count` images. Image `i` uses its own streams, so the
/// output does not depend on how images are grouped.
pub fn generate_latents(top: &PriorModel, bottom: &PriorModel, req: &SamplerRequest) -> Result<Vec<(LatentMap, LatentMap)>> {
    req.validate()?;
    let top_seed = rng::derive_seed(req.seed, "sample.top", &[]);
    let bottom_seed = rng::derive_seed(req.seed, "sample.bottom", &[]);
    let mut out = Vec::with_capacity(req.count);
    let mut start = 0;
    while start < req.count {
        let end = (start + SAMPLE_CHUNK).min(req.count);
        let mut top_rngs: Vec<_> = (start..end).map(|i| SampleRng::new(top_seed, 0, i as u64)).collect();
        let (tops, _) = sample_level_traced(top, None, &mut top_rngs, req.temperature)?;
        let mut bottom_rngs: Vec<_> = (start..end).map(|i| SampleRng::new(bottom_seed, 0, i as u64)).collect();
        let (bottoms, _) = sample_level_traced(bottom, Some(&tops), &mut bottom_rngs, req.temperature)?;
        out.extend(tops.into_iter().zip(bottoms));
        start = end;
    }
    Ok(out)
}

/// Samples and decodes `req.count` images in `[0, 1]`.
pub fn generate_images(vq: &VqVae, top: &PriorModel, bottom: &PriorModel, req: &SamplerRequest) -> Result<Vec<ImageTensor>> {
    check_compatible(vq, top, bottom)?;
    let latents = generate_latents(top, bottom, req)?;
    let mut images = Vec::with_capacity(latents.len());
    for chunk in latents.chunks(SAMPLE_CHUNK) {
        images.extend(vq.decode_batch(chunk)?);
    }
    Ok(images)
}
