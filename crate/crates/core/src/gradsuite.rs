//! Finite-difference checks of every differentiable op and composite layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::pixelcnn::{build_mask, causal_attention, masked_conv, MaskRegion, MaskType, PriorConfig, PriorModel};
use crate::nn::ParamStore;
use crate::tensor::{grad_check, ConvSpec, Graph, Tensor, Var};
use crate::vqvae::{FrozenCodes, VqConfig, VqVae};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub max_error: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_error < TOLERANCE
    }
}

fn rand_tensor(dims: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(dims, |_| r.random_range(-1.0..1.0))
}

/// Values bounded away from zero so kinks stay out of the stencil.
fn rand_away_from_zero(dims: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(dims, |_| {
        let m = r.random_range(0.05..1.0);
        if r.random::<bool>() { m } else { -m }
    })
}

/// `sum(y * w)` with a fixed random `w`, so every output coordinate matters.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(g.dims(y), &mut r);
    let w = g.constant(w)?;
    let m = g.mul(y, w)?;
    g.sum(m)
}

type Instance = (Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>, Vec<Tensor>);

fn instance(op: &str, r: &mut ChaCha8Rng) -> Result<Instance> {
    let pseed: u64 = r.random();
    let dim = |r: &mut ChaCha8Rng, lo: usize, hi: usize| r.random_range(lo..=hi);
    let inst: Instance = match op {
        "add" | "sub" | "mul" => {
            let d = [dim(r, 1, 2), dim(r, 1, 3), dim(r, 2, 3), dim(r, 2, 3)];
            let name = op.to_string();
            (
                Box::new(move |g, v| {
                    let y = match name.as_str() {
                        "add" => g.add(v[0], v[1])?,
                        "sub" => g.sub(v[0], v[1])?,
                        _ => g.mul(v[0], v[1])?,
                    };
                    project(g, y, pseed)
                }),
                vec![rand_tensor(&d, r), rand_tensor(&d, r)],
            )
        }
        "scale_bias" => {
            let (n, c) = (dim(r, 1, 2), dim(r, 1, 4));
            let s: f64 = r.random_range(-2.0..2.0);
            (
                Box::new(move |g, v| {
                    let y = g.add_channel_bias(v[0], v[1])?;
                    let y = g.scale(y, s)?;
                    project(g, y, pseed)
                }),
                vec![rand_tensor(&[n, c, 3, 2], r), rand_tensor(&[c], r)],
            )
        }
        "relu" | "tanh" | "sigmoid" => {
            let d = [dim(r, 1, 2), dim(r, 1, 3), 3, 3];
            let name = op.to_string();
            (
                Box::new(move |g, v| {
                    let y = match name.as_str() {
                        "relu" => g.relu(v[0])?,
                        "tanh" => g.tanh(v[0])?,
                        _ => g.sigmoid(v[0])?,
                    };
                    project(g, y, pseed)
                }),
                vec![rand_away_from_zero(&d, r)],
            )
        }
        "conv2d" => {
            let (n, c, o) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3));
            let k = [1, 3][r.random_range(0..2)];
            let stride = dim(r, 1, 2);
            let pad = r.random_range(0..=k / 2);
            // odd size plus padding keeps the strided output size integral
            let h = 2 * dim(r, 2, 3) + 1 + (k + 1) % 2;
            let spec = ConvSpec::new(stride, pad);
            let fits = (h + 2 * pad - k) % stride == 0;
            let spec = if fits { spec } else { ConvSpec::new(1, pad) };
            (
                Box::new(move |g, v| {
                    let y = g.conv2d(v[0], v[1], spec)?;
                    project(g, y, pseed)
                }),
                vec![rand_tensor(&[n, c, h, h], r), rand_tensor(&[o, c, k, k], r)],
            )
        }
        "masked_conv" => {
            let (c, o) = (dim(r, 1, 3), dim(r, 1, 3));
            let (region, kh) = match r.random_range(0..3) {
                0 => (MaskRegion::Raster, 3),
                1 => (MaskRegion::Vertical, 3),
                _ => (MaskRegion::Horizontal, 1),
            };
            let mt = if r.random::<bool>() { MaskType::A } else { MaskType::B };
            let mask = build_mask(&[o, c, kh, 3], mt, region)?;
            (
                Box::new(move |g, v| {
                    let m = g.constant(mask.clone())?;
                    let y = masked_conv(g, v[0], v[1], m)?;
                    project(g, y, pseed)
                }),
                vec![rand_tensor(&[1, c, 4, 4], r), rand_tensor(&[o, c, kh, 3], r)],
            )
        }
        "gated_block" => {
            let cond = r.random::<bool>();
            let cfg = PriorConfig {
                channels: 2,
                blocks: 2,
                dropout: 0.0,
                attention_every: None,
                ..if cond { PriorConfig::bottom(3, 4, 3, 2) } else { PriorConfig::top(3, 4) }
            };
            let model = PriorModel::new(cfg, pseed)?;
            let targets: Vec<usize> = (0..16).map(|_| r.random_range(0..3)).collect();
            let cond_map = cond.then(|| {
                crate::vqvae::LatentMap::new(crate::vqvae::Level::Top, 2, (0..4).map(|_| r.random_range(0..3)).collect())
            });
            let cond_map = cond_map.transpose()?;
            let inputs = vec![
                rand_tensor(&[1, 2, 4, 4], r),
                model.params.get("block1.h_conv.w")?.clone(),
                model.params.get("block0.v_conv.w")?.clone(),
            ];
            (
                Box::new(move |g, v| {
                    let mut p = model.params.bind(g, false)?;
                    p.replace("block1.h_conv.w", v[1])?;
                    p.replace("block0.v_conv.w", v[2])?;
                    let c = model.embed_condition(g, &p, cond_map.as_ref().map(std::slice::from_ref), 1)?;
                    let y = model.forward_embedded(g, &p, v[0], c, None)?;
                    g.cross_entropy(y, &targets)
                }),
                inputs,
            )
        }
        "attention" => {
            let (c, h) = (dim(r, 1, 3), dim(r, 2, 3));
            let mut store = ParamStore::new();
            for part in ["q", "k", "v", "o"] {
                store.insert(format!("a.{part}.w"), rand_tensor(&[c, c, 1, 1], r));
            }
            let mut inputs = vec![rand_tensor(&[dim(r, 1, 2), c, h, h], r)];
            inputs.extend(["q", "k", "v", "o"].iter().map(|p| store.get(&format!("a.{p}.w")).unwrap().clone()));
            (
                Box::new(move |g, v| {
                    let mut p = store.bind(g, false)?;
                    for (i, part) in ["q", "k", "v", "o"].iter().enumerate() {
                        p.replace(&format!("a.{part}.w"), v[i + 1])?;
                    }
                    let y = causal_attention(g, &p, "a", v[0])?;
                    project(g, y, pseed)
                }),
                inputs,
            )
        }
        "cross_entropy" => {
            let (n, k) = (dim(r, 1, 3), dim(r, 2, 6));
            let targets: Vec<usize> = (0..n * 4).map(|_| r.random_range(0..k)).collect();
            (
                Box::new(move |g, v| g.cross_entropy(v[0], &targets)),
                vec![Tensor::from_fn(&[n, k, 2, 2], |_| r.random_range(-3.0..3.0))],
            )
        }
        "vq_straight_through" => {
            let cfg = VqConfig {
                resolution: 8,
                hidden: 3,
                res_blocks: 1,
                codebook_size: 4,
                code_dim: 2,
                bottom_grid: 4,
                ..VqConfig::default()
            };
            let model = VqVae::new(cfg, pseed)?;
            let x = Tensor::from_fn(&[1, 3, 8, 8], |_| r.random_range(0.0..1.0));
            let frozen = {
                let mut g = Graph::new();
                let p = model.params.bind(&mut g, false)?;
                let xv = g.constant(x.clone())?;
                let f = model.forward(&mut g, &p, xv, None)?;
                FrozenCodes::from_forward(&g, &f)?
            };
            let inputs = vec![
                x,
                model.params.get("enc_b.down0.w")?.clone(),
                model.params.get("enc_t.proj.w")?.clone(),
            ];
            (
                Box::new(move |g, v| {
                    let mut p = model.params.bind(g, false)?;
                    p.replace("enc_b.down0.w", v[1])?;
                    p.replace("enc_t.proj.w", v[2])?;
                    let f = model.forward(g, &p, v[0], Some(&frozen))?;
                    Ok(model.loss(g, v[0], &f)?.total)
                }),
                inputs,
            )
        }
        "space_to_depth" | "depth_to_space" | "upsample_nearest" | "shift_down" | "slice_channels" | "avg_pool2"
        | "mean_spatial" => {
            let c = 4 * dim(r, 1, 2);
            let name = op.to_string();
            (
                Box::new(move |g, v| {
                    let y = match name.as_str() {
                        "space_to_depth" => g.space_to_depth(v[0], 2)?,
                        "depth_to_space" => g.depth_to_space(v[0], 2)?,
                        "upsample_nearest" => g.upsample_nearest(v[0], 2)?,
                        "shift_down" => g.shift_down(v[0])?,
                        "slice_channels" => g.slice_channels(v[0], 1, 2)?,
                        "avg_pool2" => g.avg_pool2(v[0])?,
                        _ => g.mean_spatial(v[0])?,
                    };
                    project(g, y, pseed)
                }),
                vec![rand_tensor(&[dim(r, 1, 2), c, 4, 4], r)],
            )
        }
        "embedding" => {
            let (k, c) = (dim(r, 2, 5), dim(r, 1, 3));
            let idx: Vec<usize> = (0..2 * 9).map(|_| r.random_range(0..k)).collect();
            (
                Box::new(move |g, v| {
                    let y = g.embedding(v[0], &idx, 2, 3, 3)?;
                    project(g, y, pseed)
                }),
                vec![rand_tensor(&[k, c], r)],
            )
        }
        "bmm_transpose" => {
            let (b, m, k, n) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3));
            (
                Box::new(move |g, v| {
                    let bt = g.transpose_last2(v[1])?;
                    let y = g.bmm(v[0], bt)?;
                    let y = g.reshape(y, &[b * m * n])?;
                    project(g, y, pseed)
                }),
                vec![rand_tensor(&[b, m, k], r), rand_tensor(&[b, n, k], r)],
            )
        }
        "causal_softmax" => {
            let (b, l) = (dim(r, 1, 2), dim(r, 2, 5));
            (
                Box::new(move |g, v| {
                    let y = g.causal_softmax(v[0])?;
                    project(g, y, pseed)
                }),
                vec![Tensor::from_fn(&[b, l, l], |_| r.random_range(-2.0..2.0))],
            )
        }
        "mse" => {
            let d = [dim(r, 1, 3), dim(r, 1, 4)];
            (Box::new(|g, v| g.mse(v[0], v[1])), vec![rand_tensor(&d, r), rand_tensor(&d, r)])
        }
        other => unreachable!("unknown suite op {other}"),
    };
    Ok(inst)
}

pub const SUITE_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale_bias",
    "relu",
    "tanh",
    "sigmoid",
    "conv2d",
    "masked_conv",
    "gated_block",
    "attention",
    "cross_entropy",
    "vq_straight_through",
    "space_to_depth",
    "depth_to_space",
    "upsample_nearest",
    "shift_down",
    "slice_channels",
    "avg_pool2",
    "mean_spatial",
    "embedding",
    "bmm_transpose",
    "causal_softmax",
    "mse",
];

/// Runs `instances` randomized checks of every op in [`SUITE_OPS`].
pub fn run_suite(seed: u64, instances: usize, eps: f64) -> Result<Vec<OpReport>> {
    SUITE_OPS
        .iter()
        .map(|&op| {
            let mut r = crate::rng::stream(seed, "gradsuite", &[op.len() as u64, op.bytes().map(u64::from).sum()]);
            let mut worst = 0.0f64;
            for _ in 0..instances {
                let (f, inputs) = instance(op, &mut r)?;
                worst = worst.max(grad_check(f, &inputs, eps)?);
            }
            Ok(OpReport {
                op,
                instances,
                max_error: worst,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_a_few_instances() {
        for r in run_suite(3, 2, DEFAULT_EPS).unwrap() {
            assert!(r.passed(), "{} max error {}", r.op, r.max_error);
        }
    }
}
