//! Autoregressive priors over latent index grids: gated PixelCNN with
//! separate vertical and horizontal stacks, optional causal self-attention.

mod masked;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use masked::{build_mask, mask_footprint, masked_conv, MaskRegion, MaskType, MaskedKernel};

use crate::error::{Error, Result};
use crate::nn::{conv_same, he_uniform, Bound, ParamStore};
use crate::tensor::{ConvSpec, Graph, Tensor, Var};
use crate::vqvae::{LatentMap, Level};

#[derive(Debug, Clone, PartialEq)]
pub struct PriorConfig {
    pub level: Level,
    /// Codebook size of the modelled level.
    pub vocab: usize,
    /// Grid side of the modelled level.
    pub side: usize,
    /// Codebook size and grid side of the conditioning (top) level.
    pub cond: Option<(usize, usize)>,
    pub channels: usize,
    pub blocks: usize,
    pub dropout: f64,
    /// Attention after every n-th block; `None` disables it.
    pub attention_every: Option<usize>,
    pub zero_init_head: bool,
}

impl PriorConfig {
    pub fn top(vocab: usize, side: usize) -> Self {
        Self {
            level: Level::Top,
            vocab,
            side,
            cond: None,
            channels: 32,
            blocks: 4,
            dropout: 0.2,
            attention_every: Some(2),
            zero_init_head: false,
        }
    }

    pub fn bottom(vocab: usize, side: usize, top_vocab: usize, top_side: usize) -> Self {
        Self {
            level: Level::Bottom,
            vocab,
            side,
            cond: Some((top_vocab, top_side)),
            channels: 32,
            blocks: 6,
            dropout: 0.2,
            attention_every: None,
            zero_init_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab == 0 || self.side == 0 || self.channels == 0 || self.blocks == 0 {
            return bad(format!("prior dimensions must be positive: {self:?}"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.attention_every == Some(0) {
            return bad("attention interval must be positive".into());
        }
        match (self.level, self.cond) {
            (Level::Bottom, None) => bad("bottom prior needs a conditioning level".into()),
            (Level::Top, Some(_)) => bad("top prior takes no conditioning".into()),
            (_, Some((k, s))) if k == 0 || s == 0 || self.side != 2 * s => {
                bad(format!("conditioning grid {s} (K={k}) must be half of {}", self.side))
            }
            _ => Ok(()),
        }
    }

    fn has_attention_after(&self, block: usize) -> bool {
        matches!(self.attention_every, Some(n) if (block + 1) % n == 0)
    }

    pub fn to_meta(&self) -> Vec<(String, String)> {
        let mut m = vec![
            ("prior.level".to_string(), self.level.to_string()),
            ("prior.vocab".into(), self.vocab.to_string()),
            ("prior.side".into(), self.side.to_string()),
            ("prior.channels".into(), self.channels.to_string()),
            ("prior.blocks".into(), self.blocks.to_string()),
            ("prior.dropout".into(), self.dropout.to_string()),
            ("prior.attention_every".into(), self.attention_every.unwrap_or(0).to_string()),
            ("prior.zero_init_head".into(), self.zero_init_head.to_string()),
        ];
        if let Some((k, s)) = self.cond {
            m.push(("prior.cond_vocab".into(), k.to_string()));
            m.push(("prior.cond_side".into(), s.to_string()));
        }
        m
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(meta: &BTreeMap<String, String>, k: &str) -> Result<T> {
            let v = meta.get(k).ok_or_else(|| Error::Format(format!("checkpoint lacks '{k}'")))?;
            v.parse().map_err(|_| Error::Format(format!("bad value '{v}' for '{k}'")))
        }
        let cond = match meta.contains_key("prior.cond_vocab") {
            true => Some((get(meta, "prior.cond_vocab")?, get(meta, "prior.cond_side")?)),
            false => None,
        };
        let every: usize = get(meta, "prior.attention_every")?;
        let cfg = Self {
            level: get(meta, "prior.level")?,
            vocab: get(meta, "prior.vocab")?,
            side: get(meta, "prior.side")?,
            cond,
            channels: get(meta, "prior.channels")?,
            blocks: get(meta, "prior.blocks")?,
            dropout: get(meta, "prior.dropout")?,
            attention_every: (every > 0).then_some(every),
            zero_init_head: get(meta, "prior.zero_init_head")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Gated PixelCNN prior for one latent level.
#[derive(Debug, Clone)]
pub struct PriorModel {
    pub config: PriorConfig,
    pub params: ParamStore,
    masks: BTreeMap<String, Tensor>,
}

/// Per-forward randomness. `None` means eval mode (no dropout).
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

impl PriorModel {
    pub fn new(config: PriorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let mut p = ParamStore::new();
        p.insert("embed", Tensor::from_fn(&[config.vocab, c], |_| rng.random_range(-1.0..1.0)));
        if let Some((k, _)) = config.cond {
            p.insert("cond_embed", Tensor::from_fn(&[k, c], |_| rng.random_range(-1.0..1.0)));
        }
        for b in 0..config.blocks {
            let n = format!("block{b}");
            p.add_conv(&format!("{n}.v_conv"), 2 * c, c, 3, 3, &mut rng);
            p.add_conv(&format!("{n}.h_conv"), 2 * c, c, 1, 3, &mut rng);
            p.add_conv(&format!("{n}.v2h"), 2 * c, 2 * c, 1, 1, &mut rng);
            p.add_conv(&format!("{n}.h_out"), c, c, 1, 1, &mut rng);
            if config.cond.is_some() {
                p.add_conv(&format!("{n}.cond_v"), 2 * c, c, 1, 1, &mut rng);
                p.add_conv(&format!("{n}.cond_h"), 2 * c, c, 1, 1, &mut rng);
            }
            if config.has_attention_after(b) {
                for part in ["q", "k", "v", "o"] {
                    p.insert(format!("attn{b}.{part}.w"), he_uniform(&[c, c, 1, 1], c, &mut rng));
                }
            }
        }
        p.add_conv("head", config.vocab, c, 1, 1, &mut rng);
        if config.zero_init_head {
            *p.get_mut("head.w").expect("just added") = Tensor::zeros(&[config.vocab, c, 1, 1]);
        }
        Self::from_params(config, p)
    }

    /// Wraps existing parameters, checking them against a fresh layout.
    pub fn from_params(config: PriorConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut masks = BTreeMap::new();
        for b in 0..config.blocks {
            let h_type = if b == 0 { MaskType::A } else { MaskType::B };
            masks.insert(format!("block{b}.v"), build_mask(&[2 * c, c, 3, 3], MaskType::B, MaskRegion::Vertical)?);
            masks.insert(format!("block{b}.h"), build_mask(&[2 * c, c, 1, 3], h_type, MaskRegion::Horizontal)?);
        }
        let model = Self { config, params, masks };
        for (name, t) in model.params.iter() {
            t.ensure_finite(name)?;
        }
        Ok(model)
    }

    /// Checks a loaded parameter set against the layout `new` would create.
    pub fn check_params(&self) -> Result<()> {
        let reference = Self::new(self.config.clone(), 0)?;
        reference.params.check_layout(&self.params)
    }

    fn check_maps(&self, maps: &[LatentMap], vocab: usize, side: usize, what: &str) -> Result<Vec<usize>> {
        let mut idx = Vec::with_capacity(maps.len() * side * side);
        for m in maps {
            if m.side != side {
                return Err(Error::Shape(format!("{what} map side {} != {side}", m.side)));
            }
            m.check_codes(vocab)?;
            idx.extend_from_slice(&m.values);
        }
        Ok(idx)
    }

    /// Embeds a batch of latent grids, `[N, C, T, T]`.
    pub fn embed(&self, g: &mut Graph, p: &Bound, maps: &[LatentMap]) -> Result<Var> {
        if maps.is_empty() {
            return Err(Error::Shape("empty latent batch".into()));
        }
        let t = self.config.side;
        let idx = self.check_maps(maps, self.config.vocab, t, "input")?;
        g.embedding(p.get("embed")?, &idx, maps.len(), t, t)
    }

    /// Upsampled conditioning features `[N, C, T, T]` from top-level grids.
    pub fn embed_condition(&self, g: &mut Graph, p: &Bound, cond: Option<&[LatentMap]>, n: usize) -> Result<Option<Var>> {
        match (self.config.cond, cond) {
            (None, None) => Ok(None),
            (None, Some(_)) => Err(Error::Config("top prior takes no conditioning".into())),
            (Some(_), None) => Err(Error::Config("bottom prior requires conditioning top indices".into())),
            (Some((k, s)), Some(maps)) => {
                if maps.len() != n {
                    return Err(Error::Shape(format!("{} conditioning maps for batch of {n}", maps.len())));
                }
                let idx = self.check_maps(maps, k, s, "conditioning")?;
                let e = g.embedding(p.get("cond_embed")?, &idx, n, s, s)?;
                Ok(Some(g.upsample_nearest(e, 2)?))
            }
        }
    }

    /// Logits `[N, K, T, T]` from already-embedded input.
    pub fn forward_embedded(&self, g: &mut Graph, p: &Bound, x: Var, cond: Option<Var>, mut rng: DropoutRng) -> Result<Var> {
        let c = self.config.channels;
        let mut v = x;
        let mut h = x;
        for b in 0..self.config.blocks {
            let n = format!("block{b}");
            let vm = g.constant(self.masks[&format!("{n}.v")].clone())?;
            let hm = g.constant(self.masks[&format!("{n}.h")].clone())?;

            let mut v_pre = masked_conv(g, v, p.get(&format!("{n}.v_conv.w"))?, vm)?;
            v_pre = g.add_channel_bias(v_pre, p.get(&format!("{n}.v_conv.b"))?)?;
            let mut h_pre = masked_conv(g, h, p.get(&format!("{n}.h_conv.w"))?, hm)?;
            h_pre = g.add_channel_bias(h_pre, p.get(&format!("{n}.h_conv.b"))?)?;

            let shifted = g.shift_down(v_pre)?;
            let link = conv_same(g, p, &format!("{n}.v2h"), shifted)?;
            h_pre = g.add(h_pre, link)?;

            if let Some(cv) = cond {
                let cvv = conv_same(g, p, &format!("{n}.cond_v"), cv)?;
                v_pre = g.add(v_pre, cvv)?;
                let chh = conv_same(g, p, &format!("{n}.cond_h"), cv)?;
                h_pre = g.add(h_pre, chh)?;
            }

            v = gate(g, v_pre, c)?;
            let h_gated = gate(g, h_pre, c)?;
            let h_new = conv_same(g, p, &format!("{n}.h_out"), h_gated)?;
            h = if b == 0 {
                h_new
            } else {
                let dropped = dropout(g, h_new, self.config.dropout, rng.as_deref_mut())?;
                g.add(h, dropped)?
            };

            if self.config.has_attention_after(b) {
                h = causal_attention(g, p, &format!("attn{b}"), h)?;
            }
        }
        let out = g.relu(h)?;
        conv_same(g, p, "head", out)
    }

    pub fn forward_logits(
        &self,
        g: &mut Graph,
        p: &Bound,
        maps: &[LatentMap],
        cond: Option<&[LatentMap]>,
        rng: DropoutRng,
    ) -> Result<Var> {
        let x = self.embed(g, p, maps)?;
        let c = self.embed_condition(g, p, cond, maps.len())?;
        self.forward_embedded(g, p, x, c, rng)
    }

    /// Mean per-position negative log-likelihood (nats) of `maps`.
    pub fn nll_loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        maps: &[LatentMap],
        cond: Option<&[LatentMap]>,
        rng: DropoutRng,
    ) -> Result<Var> {
        let logits = self.forward_logits(g, p, maps, cond, rng)?;
        let targets: Vec<usize> = maps.iter().flat_map(|m| m.values.iter().copied()).collect();
        g.cross_entropy(logits, &targets)
    }

    /// Eval-mode NLL as a plain number.
    pub fn evaluate_nll(&self, maps: &[LatentMap], cond: Option<&[LatentMap]>) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false)?;
        let loss = self.nll_loss(&mut g, &p, maps, cond, None)?;
        Ok(g.value(loss).item())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let prefix = format!("prior.{}", self.config.level);
        self.params.prefixed(&prefix).map(|(k, v)| (k, v.clone())).collect()
    }

    pub fn from_named_tensors(config: PriorConfig, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let prefix = format!("prior.{}.", config.level);
        let mut params = ParamStore::new();
        for (k, v) in tensors {
            if let Some(rest) = k.strip_prefix(&prefix) {
                params.insert(rest, v.clone());
            }
        }
        let model = Self::from_params(config, params)?;
        model.check_params()?;
        Ok(model)
    }
}

/// `tanh(a) * sigmoid(b)` over the two channel halves of `[N, 2C, H, W]`.
pub fn gate(g: &mut Graph, x: Var, c: usize) -> Result<Var> {
    let a = g.slice_channels(x, 0, c)?;
    let b = g.slice_channels(x, c, c)?;
    let a = g.tanh(a)?;
    let b = g.sigmoid(b)?;
    g.mul(a, b)
}

/// Inverted dropout with a constant mask. Identity when `rng` is `None`.
pub fn dropout(g: &mut Graph, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = Tensor::from_fn(g.dims(x), |_| if rng.random::<f64>() < rate { 0.0 } else { keep });
    let m = g.constant(mask)?;
    g.mul(x, m)
}

/// Single-head causal self-attention over raster positions of `[N, C, H, W]`
/// with a residual connection. Position 0 receives a zero context.
pub fn causal_attention(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let &[n, c, h, w] = g.dims(x) else {
        return Err(Error::Shape(format!("attention input must be 4-d, got {:?}", g.dims(x))));
    };
    let l = h * w;
    let proj = |g: &mut Graph, part: &str| -> Result<Var> {
        let y = g.conv2d(x, p.get(&format!("{name}.{part}.w"))?, ConvSpec::new(1, 0))?;
        g.reshape(y, &[n, c, l])
    };
    let q = proj(g, "q")?;
    let k = proj(g, "k")?;
    let v = proj(g, "v")?;
    let qt = g.transpose_last2(q)?;
    let scores = g.bmm(qt, k)?;
    let scores = g.scale(scores, 1.0 / (c as f64).sqrt())?;
    let attn = g.causal_softmax(scores)?;
    let attn_t = g.transpose_last2(attn)?;
    let ctx = g.bmm(v, attn_t)?;
    let ctx = g.reshape(ctx, &[n, c, h, w])?;
    let out = g.conv2d(ctx, p.get(&format!("{name}.o.w"))?, ConvSpec::new(1, 0))?;
    g.add(x, out)
}
