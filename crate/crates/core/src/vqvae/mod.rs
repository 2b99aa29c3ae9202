//! Two-level vector-quantized autoencoder.
//!
//! The bottom encoder downsamples the image to the bottom grid; the top
//! encoder halves that once more. The quantized top map is upsampled and
//! added to the bottom encoder features before bottom quantization, and the
//! decoder consumes both quantized maps. Codebooks are trained by moving
//! averages; encoder and decoder weights by gradients of
//! `mse(x, recon) + beta * sum_levels mse(z_e, sg[z_q])`.

mod codebook;
mod latent;

use std::collections::BTreeMap;

pub use codebook::{quantize, Codebook};
pub use latent::{Level, LatentMap, LATENT_FORMAT_VERSION};

use crate::error::{shape_err, Error, Result};
use crate::image::ImageTensor;
use crate::nn::{self, Bound, ParamStore};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct VqConfig {
    pub resolution: usize,
    pub channels: usize,
    pub hidden: usize,
    pub res_blocks: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    /// Side of the bottom latent grid; the top grid is half of it.
    pub bottom_grid: usize,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            channels: 3,
            hidden: 32,
            res_blocks: 2,
            codebook_size: 256,
            code_dim: 64,
            bottom_grid: 8,
            beta: 0.25,
            gamma: 0.99,
            epsilon: 1e-5,
        }
    }
}

impl VqConfig {
    /// 256x256 inputs with 16x16 bottom and 8x8 top grids.
    pub fn full_resolution() -> Self {
        Self {
            resolution: 256,
            hidden: 128,
            bottom_grid: 16,
            ..Self::default()
        }
    }

    pub fn top_grid(&self) -> usize {
        self.bottom_grid / 2
    }

    /// Number of factor-2 downsampling stages from the image to the bottom grid.
    pub fn bottom_downsamples(&self) -> usize {
        (self.resolution / self.bottom_grid).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.bottom_grid < 2 || self.bottom_grid % 2 != 0 {
            return bad(format!("bottom grid {} must be even and at least 2", self.bottom_grid));
        }
        if self.resolution % self.bottom_grid != 0 || !(self.resolution / self.bottom_grid).is_power_of_two() {
            return bad(format!(
                "resolution {} must be a power-of-two multiple of the bottom grid {}",
                self.resolution, self.bottom_grid
            ));
        }
        if self.channels == 0 || self.hidden == 0 || self.codebook_size == 0 || self.code_dim == 0 {
            return bad("channels, hidden, codebook_size and code_dim must be positive".into());
        }
        if !(self.beta > 0.0) {
            return bad(format!("beta {} must be positive", self.beta));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} must lie in (0, 1)", self.gamma));
        }
        Ok(())
    }

    pub fn to_meta(&self) -> Vec<(String, String)> {
        [
            ("resolution", self.resolution.to_string()),
            ("channels", self.channels.to_string()),
            ("hidden", self.hidden.to_string()),
            ("res_blocks", self.res_blocks.to_string()),
            ("codebook_size", self.codebook_size.to_string()),
            ("code_dim", self.code_dim.to_string()),
            ("bottom_grid", self.bottom_grid.to_string()),
            ("beta", self.beta.to_string()),
            ("gamma", self.gamma.to_string()),
            ("epsilon", self.epsilon.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("vqvae.{k}"), v))
        .collect()
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        fn field<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let full = format!("vqvae.{key}");
            meta.get(&full)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks '{full}'")))?
                .parse()
                .map_err(|_| Error::Format(format!("checkpoint field '{full}' is malformed")))
        }
        let cfg = Self {
            resolution: field(meta, "resolution")?,
            channels: field(meta, "channels")?,
            hidden: field(meta, "hidden")?,
            res_blocks: field(meta, "res_blocks")?,
            codebook_size: field(meta, "codebook_size")?,
            code_dim: field(meta, "code_dim")?,
            bottom_grid: field(meta, "bottom_grid")?,
            beta: field(meta, "beta")?,
            gamma: field(meta, "gamma")?,
            epsilon: field(meta, "epsilon")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Graph outputs of one autoencoder pass.
#[derive(Debug)]
pub struct VqForward {
    pub recon: Var,
    pub z_e_top: Var,
    pub z_e_bottom: Var,
    pub top_indices: Vec<usize>,
    pub bottom_indices: Vec<usize>,
    pub z_q_top: Tensor,
    pub z_q_bottom: Tensor,
}

/// Loss terms of one pass.
#[derive(Debug, Clone, Copy)]
pub struct VqLossParts {
    pub total: Var,
    pub recon: f64,
    pub commitment: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqVae {
    pub config: VqConfig,
    pub params: ParamStore,
    pub top_codebook: Codebook,
    pub bottom_codebook: Codebook,
}

/// `[N, D, H, W]` -> `[N*H*W, D]` rows in `(n, y, x)` order.
pub fn nchw_to_rows(t: &Tensor) -> Result<Tensor> {
    let &[n, d, h, w] = t.dims() else {
        return Err(shape_err!("expected [N, D, H, W], got {:?}", t.dims()));
    };
    let hw = h * w;
    let mut data = vec![0.0; t.len()];
    for ni in 0..n {
        for di in 0..d {
            for p in 0..hw {
                data[(ni * hw + p) * d + di] = t.data()[(ni * d + di) * hw + p];
            }
        }
    }
    Tensor::new(vec![n * hw, d], data)
}

/// Inverse of [`nchw_to_rows`].
pub fn rows_to_nchw(rows: &Tensor, n: usize, h: usize, w: usize) -> Result<Tensor> {
    let &[m, d] = rows.dims() else {
        return Err(shape_err!("expected [M, D], got {:?}", rows.dims()));
    };
    if m != n * h * w {
        return Err(shape_err!("{m} rows do not fill {n}x{h}x{w}"));
    }
    let hw = h * w;
    let mut data = vec![0.0; rows.len()];
    for ni in 0..n {
        for p in 0..hw {
            for di in 0..d {
                data[(ni * d + di) * hw + p] = rows.data()[(ni * hw + p) * d + di];
            }
        }
    }
    Tensor::new(vec![n, d, h, w], data)
}

/// Fixed code assignments for both levels.
///
/// With offsets, the decoder input at each level is `z_e + offset` instead of
/// the looked-up codes. Taking the offsets as `z_q - z_e` from one pass makes
/// the forward value a smooth function of the encoder whose exact derivative
/// is the straight-through gradient, which is what finite differences need.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenCodes {
    pub top: Vec<usize>,
    pub bottom: Vec<usize>,
    pub offsets: Option<(Tensor, Tensor)>,
}

impl FrozenCodes {
    /// Assignments and `z_q - z_e` offsets of a finished pass.
    pub fn from_forward(g: &Graph, fwd: &VqForward) -> Result<Self> {
        let off = |z_q: &Tensor, z_e: Var| -> Result<Tensor> {
            let z_e = g.value(z_e);
            z_q.same_dims(z_e)?;
            let data = z_q.data().iter().zip(z_e.data()).map(|(q, e)| q - e).collect();
            Tensor::new(z_q.dims().to_vec(), data)
        };
        Ok(Self {
            top: fwd.top_indices.clone(),
            bottom: fwd.bottom_indices.clone(),
            offsets: Some((off(&fwd.z_q_top, fwd.z_e_top)?, off(&fwd.z_q_bottom, fwd.z_e_bottom)?)),
        })
    }
}

/// Value fed past the quantizer: the codes, or `z_e + offset`.
fn straight_through_value(z_e: &Tensor, z_q: &Tensor, offset: Option<&Tensor>) -> Result<Tensor> {
    match offset {
        None => Ok(z_q.clone()),
        Some(o) => {
            o.same_dims(z_e)?;
            let data = z_e.data().iter().zip(o.data()).map(|(e, d)| e + d).collect();
            Tensor::new(z_e.dims().to_vec(), data)
        }
    }
}

/// Quantizes an `[N, D, H, W]` map position-wise, or looks up `frozen`
/// assignments when given.
fn quantize_map(z_e: &Tensor, cb: &Codebook, frozen: Option<&[usize]>) -> Result<(Vec<usize>, Tensor)> {
    let &[n, _, h, w] = z_e.dims() else {
        return Err(shape_err!("expected [N, D, H, W], got {:?}", z_e.dims()));
    };
    let rows = nchw_to_rows(z_e)?;
    let (idx, q) = match frozen {
        Some(f) => (f.to_vec(), cb.lookup(f)?),
        None => quantize(&rows, cb)?,
    };
    if idx.len() != n * h * w {
        return Err(shape_err!("{} assignments for a {n}x{h}x{w} map", idx.len()));
    }
    Ok((idx, rows_to_nchw(&q, n, h, w)?))
}

/// `mse(x, recon) + beta * sum mse(z_e, sg[z_q])` over every `(z_e, z_q)` pair.
pub fn vq_loss(g: &mut Graph, x: Var, recon: Var, pairs: &[(Var, &Tensor)], beta: f64) -> Result<VqLossParts> {
    let rec = g.mse(x, recon)?;
    let recon_value = g.value(rec).item();
    let mut total = rec;
    let mut commitment = 0.0;
    for (z_e, z_q) in pairs {
        let target = g.constant((*z_q).clone())?;
        let c = g.mse(*z_e, target)?;
        commitment += g.value(c).item();
        let c = g.scale(c, beta)?;
        total = g.add(total, c)?;
    }
    Ok(VqLossParts {
        total,
        recon: recon_value,
        commitment,
    })
}

struct Encoded {
    z_e_top: Var,
    q_top: Var,
    z_e_bottom: Var,
    q_bottom: Var,
    top_indices: Vec<usize>,
    bottom_indices: Vec<usize>,
    z_q_top: Tensor,
    z_q_bottom: Tensor,
}

impl VqVae {
    pub fn new(config: VqConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "vqvae.init", &[]);
        let (c, hd, d) = (config.channels, config.hidden, config.code_dim);
        let mut p = ParamStore::new();
        for i in 0..config.bottom_downsamples() {
            let cin = if i == 0 { c } else { hd };
            p.add_conv(&format!("enc_b.down{i}"), hd, cin * 4, 3, 3, &mut rng);
        }
        for j in 0..config.res_blocks {
            nn::add_residual_block(&mut p, &format!("enc_b.res{j}"), hd, &mut rng);
            nn::add_residual_block(&mut p, &format!("enc_t.res{j}"), hd, &mut rng);
            nn::add_residual_block(&mut p, &format!("dec.res{j}"), hd, &mut rng);
        }
        p.add_conv("enc_t.down", hd, hd * 4, 3, 3, &mut rng);
        p.add_conv("enc_t.proj", d, hd, 1, 1, &mut rng);
        p.add_conv("enc_b.top_up", 4 * d, d, 3, 3, &mut rng);
        p.add_conv("enc_b.proj", d, hd, 1, 1, &mut rng);
        p.add_conv("dec.top_up", 4 * d, d, 3, 3, &mut rng);
        p.add_conv("dec.in", hd, d, 3, 3, &mut rng);
        for i in 0..config.bottom_downsamples() {
            p.add_conv(&format!("dec.up{i}"), 4 * hd, hd, 3, 3, &mut rng);
        }
        p.add_conv("dec.out", c, hd, 3, 3, &mut rng);

        let mut cb_rng = rng::stream(seed, "vqvae.codebook", &[]);
        let top_codebook = Codebook::random(config.codebook_size, d, config.gamma, config.epsilon, &mut cb_rng)?;
        let bottom_codebook = Codebook::random(config.codebook_size, d, config.gamma, config.epsilon, &mut cb_rng)?;
        Ok(Self {
            config,
            params: p,
            top_codebook,
            bottom_codebook,
        })
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let cfg = &self.config;
        match g.dims(x) {
            &[_, c, h, w] if c == cfg.channels && h == cfg.resolution && w == cfg.resolution => Ok(()),
            other => Err(shape_err!(
                "expected [N, {}, {}, {}] input, got {other:?}",
                cfg.channels,
                cfg.resolution,
                cfg.resolution
            )),
        }
    }

    fn encode_bottom_features(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..self.config.bottom_downsamples() {
            h = g.space_to_depth(h, 2)?;
            h = nn::conv_same(g, p, &format!("enc_b.down{i}"), h)?;
            h = g.relu(h)?;
        }
        for j in 0..self.config.res_blocks {
            h = nn::residual_block(g, p, &format!("enc_b.res{j}"), h)?;
        }
        g.relu(h)
    }

    fn encode_top(&self, g: &mut Graph, p: &Bound, h_b: Var) -> Result<Var> {
        let mut h = g.space_to_depth(h_b, 2)?;
        h = nn::conv_same(g, p, "enc_t.down", h)?;
        h = g.relu(h)?;
        for j in 0..self.config.res_blocks {
            h = nn::residual_block(g, p, &format!("enc_t.res{j}"), h)?;
        }
        h = g.relu(h)?;
        nn::conv_same(g, p, "enc_t.proj", h)
    }

    /// Factor-2 learned upsampling of a quantized top map to the bottom grid.
    fn upsample_top(&self, g: &mut Graph, p: &Bound, name: &str, q_top: Var) -> Result<Var> {
        let h = nn::conv_same(g, p, name, q_top)?;
        g.depth_to_space(h, 2)
    }

    fn decode_graph(&self, g: &mut Graph, p: &Bound, q_top: Var, q_bottom: Var) -> Result<Var> {
        let up = self.upsample_top(g, p, "dec.top_up", q_top)?;
        let mut h = g.add(q_bottom, up)?;
        h = nn::conv_same(g, p, "dec.in", h)?;
        for j in 0..self.config.res_blocks {
            h = nn::residual_block(g, p, &format!("dec.res{j}"), h)?;
        }
        h = g.relu(h)?;
        for i in 0..self.config.bottom_downsamples() {
            h = nn::conv_same(g, p, &format!("dec.up{i}"), h)?;
            h = g.depth_to_space(h, 2)?;
            h = g.relu(h)?;
        }
        h = nn::conv_same(g, p, "dec.out", h)?;
        g.sigmoid(h)
    }

    /// Encoder and both quantizers, no decoder.
    fn encode_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        frozen: Option<&FrozenCodes>,
    ) -> Result<Encoded> {
        self.check_input(g, x)?;
        let offsets = frozen.and_then(|f| f.offsets.as_ref());
        let h_b = self.encode_bottom_features(g, p, x)?;
        let z_e_top = self.encode_top(g, p, h_b)?;
        let (top_indices, z_q_top) =
            quantize_map(g.value(z_e_top), &self.top_codebook, frozen.map(|f| f.top.as_slice()))?;
        let passed = straight_through_value(g.value(z_e_top), &z_q_top, offsets.map(|o| &o.0))?;
        let q_top = g.straight_through(z_e_top, passed)?;

        let up = self.upsample_top(g, p, "enc_b.top_up", q_top)?;
        let proj = nn::conv_same(g, p, "enc_b.proj", h_b)?;
        let z_e_bottom = g.add(proj, up)?;
        let (bottom_indices, z_q_bottom) =
            quantize_map(g.value(z_e_bottom), &self.bottom_codebook, frozen.map(|f| f.bottom.as_slice()))?;
        let passed = straight_through_value(g.value(z_e_bottom), &z_q_bottom, offsets.map(|o| &o.1))?;
        let q_bottom = g.straight_through(z_e_bottom, passed)?;
        Ok(Encoded {
            z_e_top,
            q_top,
            z_e_bottom,
            q_bottom,
            top_indices,
            bottom_indices,
            z_q_top,
            z_q_bottom,
        })
    }

    /// Full pass on `[N, C, R, R]` input. With `frozen`, codes come from the
    /// given assignments instead of nearest-neighbor search.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        frozen: Option<&FrozenCodes>,
    ) -> Result<VqForward> {
        let e = self.encode_graph(g, p, x, frozen)?;
        let recon = self.decode_graph(g, p, e.q_top, e.q_bottom)?;
        Ok(VqForward {
            recon,
            z_e_top: e.z_e_top,
            z_e_bottom: e.z_e_bottom,
            top_indices: e.top_indices,
            bottom_indices: e.bottom_indices,
            z_q_top: e.z_q_top,
            z_q_bottom: e.z_q_bottom,
        })
    }

    pub fn loss(&self, g: &mut Graph, x: Var, fwd: &VqForward) -> Result<VqLossParts> {
        vq_loss(
            g,
            x,
            fwd.recon,
            &[(fwd.z_e_top, &fwd.z_q_top), (fwd.z_e_bottom, &fwd.z_q_bottom)],
            self.config.beta,
        )
    }

    /// Moving-average codebook step from a finished forward pass.
    pub fn update_codebooks(&mut self, g: &Graph, fwd: &VqForward) -> Result<()> {
        let top = nchw_to_rows(g.value(fwd.z_e_top))?;
        self.top_codebook.ema_update(top.data(), &fwd.top_indices)?;
        let bottom = nchw_to_rows(g.value(fwd.z_e_bottom))?;
        self.bottom_codebook.ema_update(bottom.data(), &fwd.bottom_indices)
    }

    fn split_maps(&self, n: usize, top: &[usize], bottom: &[usize]) -> Result<Vec<(LatentMap, LatentMap)>> {
        let (t, b) = (self.config.top_grid(), self.config.bottom_grid);
        (0..n)
            .map(|i| {
                Ok((
                    LatentMap::new(Level::Top, t, top[i * t * t..(i + 1) * t * t].to_vec())?,
                    LatentMap::new(Level::Bottom, b, bottom[i * b * b..(i + 1) * b * b].to_vec())?,
                ))
            })
            .collect()
    }

    /// `(top, bottom)` index grids for each image.
    pub fn encode_batch(&self, images: &[ImageTensor]) -> Result<Vec<(LatentMap, LatentMap)>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false)?;
        let x = g.constant(ImageTensor::stack_nchw(images)?)?;
        let e = self.encode_graph(&mut g, &p, x, None)?;
        self.split_maps(images.len(), &e.top_indices, &e.bottom_indices)
    }

    pub fn encode_hierarchy(&self, image: &ImageTensor) -> Result<(LatentMap, LatentMap)> {
        Ok(self.encode_batch(std::slice::from_ref(image))?.remove(0))
    }

    /// Decodes `(top, bottom)` pairs to images in `[0, 1]`.
    pub fn decode_batch(&self, maps: &[(LatentMap, LatentMap)]) -> Result<Vec<ImageTensor>> {
        if maps.is_empty() {
            return Ok(Vec::new());
        }
        let cfg = &self.config;
        let (t, b) = (cfg.top_grid(), cfg.bottom_grid);
        let mut top_idx = Vec::with_capacity(maps.len() * t * t);
        let mut bottom_idx = Vec::with_capacity(maps.len() * b * b);
        for (top, bottom) in maps {
            if top.side != t || bottom.side != b {
                return Err(shape_err!(
                    "latent grids {}x{} / {}x{} do not match configured {t}/{b}",
                    top.side,
                    top.side,
                    bottom.side,
                    bottom.side
                ));
            }
            top.check_codes(cfg.codebook_size)?;
            bottom.check_codes(cfg.codebook_size)?;
            top_idx.extend_from_slice(&top.values);
            bottom_idx.extend_from_slice(&bottom.values);
        }
        let n = maps.len();
        let q_top = rows_to_nchw(&self.top_codebook.lookup(&top_idx)?, n, t, t)?;
        let q_bottom = rows_to_nchw(&self.bottom_codebook.lookup(&bottom_idx)?, n, b, b)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false)?;
        let qt = g.constant(q_top)?;
        let qb = g.constant(q_bottom)?;
        let recon = self.decode_graph(&mut g, &p, qt, qb)?;
        ImageTensor::unstack_nchw(g.value(recon))
    }

    pub fn decode_hierarchy(&self, top: &LatentMap, bottom: &LatentMap) -> Result<ImageTensor> {
        Ok(self.decode_batch(&[(top.clone(), bottom.clone())])?.remove(0))
    }

    /// Every tensor needed to restore the model, by checkpoint name.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.params.prefixed("vqvae").map(|(k, v)| (k, v.clone())).collect();
        for (level, cb) in [("top", &self.top_codebook), ("bottom", &self.bottom_codebook)] {
            let k = cb.size();
            out.push((format!("vqvae.codebook.{level}.vectors"), cb.vectors.clone()));
            out.push((format!("vqvae.codebook.{level}.ema_sums"), cb.ema_sums.clone()));
            out.push((
                format!("vqvae.codebook.{level}.ema_counts"),
                Tensor::new(vec![k], cb.ema_counts.clone()).expect("counts match K"),
            ));
        }
        out
    }

    pub fn from_named_tensors(config: VqConfig, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        let mut params = ParamStore::new();
        for (name, t) in tensors {
            if let Some(rest) = name.strip_prefix("vqvae.") {
                if !rest.starts_with("codebook.") {
                    params.insert(rest, t.clone());
                }
            }
        }
        template.params.check_layout(&params)?;
        let get = |name: String| {
            tensors
                .get(&name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint lacks '{name}'")))
        };
        let mut books = Vec::new();
        for level in ["top", "bottom"] {
            let vectors = get(format!("vqvae.codebook.{level}.vectors"))?;
            let sums = get(format!("vqvae.codebook.{level}.ema_sums"))?;
            let counts = get(format!("vqvae.codebook.{level}.ema_counts"))?;
            if vectors.dims() != [config.codebook_size, config.code_dim] || sums.dims() != vectors.dims() {
                return Err(Error::Format(format!("codebook '{level}' has wrong dims")));
            }
            books.push(Codebook {
                vectors,
                ema_sums: sums,
                ema_counts: counts.into_data(),
                decay: config.gamma,
                epsilon: config.epsilon,
            });
        }
        let bottom_codebook = books.pop().expect("two codebooks");
        let top_codebook = books.pop().expect("two codebooks");
        Ok(Self {
            config,
            params,
            top_codebook,
            bottom_codebook,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> VqConfig {
        VqConfig {
            resolution: 8,
            channels: 3,
            hidden: 4,
            res_blocks: 1,
            codebook_size: 16,
            code_dim: 3,
            bottom_grid: 4,
            ..VqConfig::default()
        }
    }

    fn images(n: usize, res: usize) -> Vec<ImageTensor> {
        (0..n)
            .map(|i| ImageTensor::from_fn(res, res, 3, |y, x, c| ((y * 3 + x * 5 + c + i) % 7) as f64 / 6.0))
            .collect()
    }

    #[test]
    fn desk_grid_sizes() {
        let m = VqVae::new(VqConfig::default(), 0).unwrap();
        let (top, bottom) = m.encode_hierarchy(&images(1, 32)[0]).unwrap();
        assert_eq!((top.side, bottom.side), (4, 8));
        assert!(top.values.iter().chain(&bottom.values).all(|&v| v < 256));
    }

    #[test]
    fn wrong_resolution_is_a_shape_error() {
        let m = VqVae::new(tiny(), 0).unwrap();
        assert!(matches!(m.encode_hierarchy(&images(1, 16)[0]), Err(Error::Shape(_))));
    }

    #[test]
    fn decode_is_deterministic_and_in_range() {
        let m = VqVae::new(tiny(), 3).unwrap();
        let top = LatentMap::new(Level::Top, 2, vec![1, 2, 3, 15]).unwrap();
        let bottom = LatentMap::new(Level::Bottom, 4, (0..16).collect()).unwrap();
        let a = m.decode_hierarchy(&top, &bottom).unwrap();
        let b = m.decode_hierarchy(&top, &bottom).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), (8, 8, 3));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn decode_rejects_invalid_index() {
        let m = VqVae::new(tiny(), 3).unwrap();
        let top = LatentMap::new(Level::Top, 2, vec![1, 2, 3, 16]).unwrap();
        let bottom = LatentMap::new(Level::Bottom, 4, vec![0; 16]).unwrap();
        assert!(matches!(m.decode_hierarchy(&top, &bottom), Err(Error::Index(_))));
    }

    #[test]
    fn loss_vanishes_when_everything_matches() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 3, 2, 2], 0.25)).unwrap();
        let ze = g.constant(Tensor::full(&[1, 2, 1, 1], 0.5)).unwrap();
        let zq = Tensor::full(&[1, 2, 1, 1], 0.5);
        let parts = vq_loss(&mut g, x, x, &[(ze, &zq)], 0.25).unwrap();
        assert_eq!(g.value(parts.total).item(), 0.0);
    }

    #[test]
    fn commitment_arithmetic() {
        // one latent value differing by 2: squared norm 4, times 0.25
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 2, 2], 0.5)).unwrap();
        let ze = g.constant(Tensor::full(&[1, 1, 1, 1], 2.0)).unwrap();
        let zq = Tensor::zeros(&[1, 1, 1, 1]);
        let parts = vq_loss(&mut g, x, x, &[(ze, &zq)], 0.25).unwrap();
        assert!((g.value(parts.total).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rows_round_trip() {
        let t = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64);
        let rows = nchw_to_rows(&t).unwrap();
        assert_eq!(&rows.data()[..3], &[0.0, 4.0, 8.0]);
        assert_eq!(rows_to_nchw(&rows, 2, 2, 2).unwrap(), t);
    }

    #[test]
    fn named_tensor_round_trip() {
        let m = VqVae::new(tiny(), 9).unwrap();
        let map: BTreeMap<_, _> = m.named_tensors().into_iter().collect();
        let back = VqVae::from_named_tensors(tiny(), &map).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn config_meta_round_trip() {
        let cfg = VqConfig::full_resolution();
        let meta: BTreeMap<_, _> = cfg.to_meta().into_iter().collect();
        assert_eq!(VqConfig::from_meta(&meta).unwrap(), cfg);
    }
}
