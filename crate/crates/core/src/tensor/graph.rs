//! Reverse-mode differentiation over an append-only tape.
//!
//! Every operation appends a node holding its output value and an [`Op`]
//! record naming its inputs. Nodes are only ever appended, so tape order is
//! already a topological order and the backward pass walks it in reverse.

use crate::error::{shape_err, Error, Result};

use super::conv::{self, ConvGeom, ConvSpec};
use super::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddChannelBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Conv2d(Var, Var, ConvGeom),
    SpaceToDepth(Var, usize),
    DepthToSpace(Var, usize),
    UpsampleNearest(Var, usize),
    ShiftDown(Var),
    SliceChannels { x: Var, start: usize },
    Embedding { table: Var, indices: Vec<usize> },
    Reshape(Var),
    TransposeLast2(Var),
    Bmm(Var, Var),
    CausalSoftmax(Var),
    Mse(Var, Var),
    CrossEntropy { logits: Var, probs: Vec<f64>, targets: Vec<usize> },
    StraightThrough(Var),
    Sum(Var),
    AvgPool2(Var),
    MeanSpatial(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The tape. One graph is built per forward pass and dropped after backward.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Accumulated gradients indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `dims` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, dims: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(dims))
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    t.dims()
        .try_into()
        .map_err(|_| shape_err!("{what} expects a 4-d tensor, got {:?}", t.dims()))
}

fn dims3(t: &Tensor, what: &str) -> Result<[usize; 3]> {
    t.dims()
        .try_into()
        .map_err(|_| shape_err!("{what} expects a 3-d tensor, got {:?}", t.dims()))
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients (also serves as stop-gradient).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.same_dims(tb).map_err(|e| shape_err!("{name}: {e}"))?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.dims().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng, "mul")
    }

    /// Adds `bias[c]` to every element of channel `c` of an `[N, C, ...]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() < 2 || tb.dims() != [tx.dims()[1]] {
            return Err(shape_err!("bias {:?} does not match channels of {:?}", tb.dims(), tx.dims()));
        }
        let c = tx.dims()[1];
        let inner: usize = tx.dims()[2..].iter().product();
        let mut out = tx.clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let b = tb.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(out, Op::AddChannelBias(x, bias), ng, "add_channel_bias")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng, "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng, "relu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng, "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng, "sigmoid")
    }

    /// `[N, C, H, W] * [O, C, kh, kw] -> [N, O, H', W']` cross-correlation.
    pub fn conv2d(&mut self, x: Var, kernel: Var, spec: ConvSpec) -> Result<Var> {
        let g = ConvGeom::new(self.dims(x), self.dims(kernel), spec)?;
        let out = conv::forward(&g, self.value(x).data(), self.value(kernel).data());
        let out = Tensor::new(g.out_dims(), out)?;
        let ng = self.ng(x) || self.ng(kernel);
        self.push(out, Op::Conv2d(x, kernel, g), ng, "conv2d")
    }

    /// Moves each `f x f` spatial block into channels: `[N,C,H,W] -> [N,C*f*f,H/f,W/f]`.
    pub fn space_to_depth(&mut self, x: Var, f: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "space_to_depth")?;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(shape_err!("space_to_depth factor {f} does not divide {h}x{w}"));
        }
        let (oh, ow) = (h / f, w / f);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let oc = (ci * f + y % f) * f + xx % f;
                        out[((ni * c * f * f + oc) * oh + y / f) * ow + xx / f] =
                            src[((ni * c + ci) * h + y) * w + xx];
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, c * f * f, oh, ow], out)?;
        let ng = self.ng(x);
        self.push(out, Op::SpaceToDepth(x, f), ng, "space_to_depth")
    }

    /// Inverse of [`Graph::space_to_depth`].
    pub fn depth_to_space(&mut self, x: Var, f: usize) -> Result<Var> {
        let [n, cf, h, w] = dims4(self.value(x), "depth_to_space")?;
        if f == 0 || cf % (f * f) != 0 {
            return Err(shape_err!("depth_to_space factor {f} does not divide {cf} channels"));
        }
        let c = cf / (f * f);
        let (oh, ow) = (h * f, w * f);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let ic = (ci * f + y % f) * f + xx % f;
                        out[((ni * c + ci) * oh + y) * ow + xx] =
                            src[((ni * cf + ic) * h + y / f) * w + xx / f];
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        let ng = self.ng(x);
        self.push(out, Op::DepthToSpace(x, f), ng, "depth_to_space")
    }

    pub fn upsample_nearest(&mut self, x: Var, f: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "upsample_nearest")?;
        let (oh, ow) = (h * f, w * f);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(plane * oh + y) * ow + xx] = src[(plane * h + y / f) * w + xx / f];
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        let ng = self.ng(x);
        self.push(out, Op::UpsampleNearest(x, f), ng, "upsample_nearest")
    }

    /// Shifts rows down by one, filling the top row with zeros.
    pub fn shift_down(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "shift_down")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            out[base + w..base + h * w].copy_from_slice(&src[base..base + (h - 1) * w]);
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        let ng = self.ng(x);
        self.push(out, Op::ShiftDown(x), ng, "shift_down")
    }

    /// Channels `[start, start+len)` of an `[N, C, ...]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 || start + len > t.dims()[1] || len == 0 {
            return Err(shape_err!("channel slice {start}+{len} out of {:?}", t.dims()));
        }
        let (n, c) = (t.dims()[0], t.dims()[1]);
        let inner: usize = t.dims()[2..].iter().product();
        let mut data = Vec::with_capacity(n * len * inner);
        for ni in 0..n {
            let base = (ni * c + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut dims = t.dims().to_vec();
        dims[1] = len;
        let out = Tensor::new(dims, data)?;
        let ng = self.ng(x);
        self.push(out, Op::SliceChannels { x, start }, ng, "slice_channels")
    }

    /// Looks up rows of a `[K, C]` table for an `[N, H, W]` index grid, giving `[N, C, H, W]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize], n: usize, h: usize, w: usize) -> Result<Var> {
        let t = self.value(table);
        let &[k, c] = t.dims() else {
            return Err(shape_err!("embedding table must be 2-d, got {:?}", t.dims()));
        };
        if indices.len() != n * h * w {
            return Err(shape_err!("{} indices for a {n}x{h}x{w} grid", indices.len()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::Index(format!("index {bad} outside vocabulary of {k}")));
        }
        let hw = h * w;
        let mut out = vec![0.0; n * c * hw];
        for ni in 0..n {
            for p in 0..hw {
                let row = &t.data()[indices[ni * hw + p] * c..][..c];
                for (ci, &v) in row.iter().enumerate() {
                    out[(ni * c + ci) * hw + p] = v;
                }
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        let ng = self.ng(table);
        self.push(
            out,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            ng,
            "embedding",
        )
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(dims)?;
        let ng = self.ng(x);
        self.push(out, Op::Reshape(x), ng, "reshape")
    }

    /// `[B, M, N] -> [B, N, M]`.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let [b, m, n] = dims3(self.value(x), "transpose_last2")?;
        let out = Tensor::new(vec![b, n, m], transpose_batched(self.value(x).data(), b, m, n))?;
        let ng = self.ng(x);
        self.push(out, Op::TransposeLast2(x), ng, "transpose_last2")
    }

    /// Batched matrix product `[B, M, K] x [B, K, N] -> [B, M, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, m, k] = dims3(self.value(a), "bmm")?;
        let [bb, kb, n] = dims3(self.value(b), "bmm")?;
        if ba != bb || k != kb {
            return Err(shape_err!("bmm {:?} x {:?}", self.dims(a), self.dims(b)));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; ba * m * n];
        for i in 0..ba {
            conv::gemm(m, k, n, &da[i * m * k..], false, &db[i * k * n..], false, 0.0, &mut out[i * m * n..]);
        }
        let out = Tensor::new(vec![ba, m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Bmm(a, b), ng, "bmm")
    }

    /// Row softmax over `[B, L, L]` scores where row `i` only sees columns `j < i`.
    /// Masked entries are exactly zero and row 0 is entirely zero.
    pub fn causal_softmax(&mut self, scores: Var) -> Result<Var> {
        let [b, l, l2] = dims3(self.value(scores), "causal_softmax")?;
        if l != l2 {
            return Err(shape_err!("causal_softmax needs square scores, got {l}x{l2}"));
        }
        let src = self.value(scores).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for i in 1..l {
                let row = &src[(bi * l + i) * l..][..i];
                let dst = &mut out[(bi * l + i) * l..][..i];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (d, &s) in dst.iter_mut().zip(row) {
                    *d = (s - m).exp();
                    z += *d;
                }
                dst.iter_mut().for_each(|d| *d /= z);
            }
        }
        let out = Tensor::new(vec![b, l, l], out)?;
        let ng = self.ng(scores);
        self.push(out, Op::CausalSoftmax(scores), ng, "causal_softmax")
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary(a, b, "mse", |x, y| x - y)?;
        let out = Tensor::scalar(d.sq_norm() / d.len() as f64);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mse(a, b), ng, "mse")
    }

    /// Mean negative log-likelihood of `targets` under softmax over dim 1 of
    /// `[N, K, ...]` logits. Targets are ordered `(n, spatial...)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() < 2 {
            return Err(shape_err!("cross_entropy expects [N, K, ...], got {:?}", t.dims()));
        }
        let (n, k) = (t.dims()[0], t.dims()[1]);
        let inner: usize = t.dims()[2..].iter().product();
        if targets.len() != n * inner {
            return Err(shape_err!("{} targets for logits {:?}", targets.len(), t.dims()));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= k) {
            return Err(Error::Index(format!("target {bad} outside [0, {k})")));
        }
        let mut probs = vec![0.0; t.len()];
        let mut loss = 0.0;
        let src = t.data();
        for ni in 0..n {
            for p in 0..inner {
                let at = |c: usize| (ni * k + c) * inner + p;
                let m = (0..k).map(|c| src[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..k).map(|c| (src[at(c)] - m).exp()).sum();
                for c in 0..k {
                    probs[at(c)] = (src[at(c)] - m).exp() / z;
                }
                let target = targets[ni * inner + p];
                loss += z.ln() + m - src[at(target)];
            }
        }
        let count = (n * inner) as f64;
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss / count),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            ng,
            "cross_entropy",
        )
    }

    /// Forward value `quantized`; backward copies the upstream gradient to `z_e`.
    pub fn straight_through(&mut self, z_e: Var, quantized: Tensor) -> Result<Var> {
        self.value(z_e).same_dims(&quantized)?;
        let ng = self.ng(z_e);
        self.push(quantized, Op::StraightThrough(z_e), ng, "straight_through")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(out, Op::Sum(x), ng, "sum")
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("avg_pool2 needs even spatial dims, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    let at = |dy: usize, dx: usize| src[(plane * h + 2 * y + dy) * w + 2 * xx + dx];
                    out[(plane * oh + y) * ow + xx] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        let ng = self.ng(x);
        self.push(out, Op::AvgPool2(x), ng, "avg_pool2")
    }

    /// `[N, C, H, W] -> [N, C]` mean over spatial positions.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "mean_spatial")?;
        let hw = (h * w) as f64;
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / hw)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        let ng = self.ng(x);
        self.push(out, Op::MeanSpatial(x), ng, "mean_spatial")
    }

    /// Reverse pass from a scalar node, seeded with gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!("backward needs a scalar, got {:?}", self.dims(loss)));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = zip_map(g, tb, |x, y| x * y);
                    self.accumulate(grads, *a, d);
                }
                if self.ng(*b) {
                    let d = zip_map(g, ta, |x, y| x * y);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::AddChannelBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.ng(*bias) {
                    let c = self.dims(*bias)[0];
                    let inner: usize = g.dims()[2..].iter().product();
                    let mut db = Tensor::zeros(&[c]);
                    for (i, chunk) in g.data().chunks(inner).enumerate() {
                        db.data_mut()[i % c] += chunk.iter().sum::<f64>();
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::Relu(a) => {
                let d = zip_map(g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => self.accumulate(grads, *a, zip_map(g, out, |gv, y| gv * (1.0 - y * y))),
            Op::Sigmoid(a) => self.accumulate(grads, *a, zip_map(g, out, |gv, y| gv * y * (1.0 - y))),
            Op::Conv2d(x, k, geom) => {
                let (dx, dk) = conv::backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*k).data(),
                    g.data(),
                    self.ng(*x),
                    self.ng(*k),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(self.dims(*x).to_vec(), dx)?);
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, *k, Tensor::new(self.dims(*k).to_vec(), dk)?);
                }
            }
            Op::SpaceToDepth(x, f) => {
                let mut tmp = Graph::new();
                let gv = tmp.constant(g.clone())?;
                let back = tmp.depth_to_space(gv, *f)?;
                self.accumulate(grads, *x, tmp.value(back).clone());
            }
            Op::DepthToSpace(x, f) => {
                let mut tmp = Graph::new();
                let gv = tmp.constant(g.clone())?;
                let back = tmp.space_to_depth(gv, *f)?;
                self.accumulate(grads, *x, tmp.value(back).clone());
            }
            Op::UpsampleNearest(x, f) => {
                let [n, c, h, w] = dims4(self.value(*x), "upsample_nearest")?;
                let (oh, ow) = (h * f, w * f);
                let mut d = Tensor::zeros(&[n, c, h, w]);
                for plane in 0..n * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            d.data_mut()[(plane * h + y / f) * w + xx / f] += g.data()[(plane * oh + y) * ow + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::ShiftDown(x) => {
                let [n, c, h, w] = dims4(g, "shift_down")?;
                let mut d = Tensor::zeros(&[n, c, h, w]);
                for plane in 0..n * c {
                    let base = plane * h * w;
                    d.data_mut()[base..base + (h - 1) * w].copy_from_slice(&g.data()[base + w..base + h * w]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::SliceChannels { x, start } => {
                let src_dims = self.dims(*x).to_vec();
                let (n, c) = (src_dims[0], src_dims[1]);
                let len = g.dims()[1];
                let inner: usize = src_dims[2..].iter().product();
                let mut d = Tensor::zeros(&src_dims);
                for ni in 0..n {
                    let dst = (ni * c + start) * inner;
                    let src = ni * len * inner;
                    d.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::Embedding { table, indices } => {
                let tdims = self.dims(*table).to_vec();
                let c = tdims[1];
                let [n, _, h, w] = dims4(g, "embedding")?;
                let hw = h * w;
                let mut d = Tensor::zeros(&tdims);
                for ni in 0..n {
                    for p in 0..hw {
                        let row = indices[ni * hw + p];
                        for ci in 0..c {
                            d.data_mut()[row * c + ci] += g.data()[(ni * c + ci) * hw + p];
                        }
                    }
                }
                self.accumulate(grads, *table, d);
            }
            Op::Reshape(x) => {
                let d = g.clone().reshape(self.dims(*x))?;
                self.accumulate(grads, *x, d);
            }
            Op::TransposeLast2(x) => {
                let [b, n, m] = dims3(g, "transpose_last2")?;
                let d = Tensor::new(vec![b, m, n], transpose_batched(g.data(), b, n, m))?;
                self.accumulate(grads, *x, d);
            }
            Op::Bmm(a, b) => {
                let [batch, m, k] = dims3(self.value(*a), "bmm")?;
                let n = self.dims(*b)[2];
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    let mut d = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        conv::gemm(m, n, k, &g.data()[i * m * n..], false, &db[i * k * n..], true, 0.0, &mut d[i * m * k..]);
                    }
                    self.accumulate(grads, *a, Tensor::new(vec![batch, m, k], d)?);
                }
                if self.ng(*b) {
                    let mut d = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        conv::gemm(k, m, n, &da[i * m * k..], true, &g.data()[i * m * n..], false, 0.0, &mut d[i * k * n..]);
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![batch, k, n], d)?);
                }
            }
            Op::CausalSoftmax(x) => {
                let [b, l, _] = dims3(out, "causal_softmax")?;
                let mut d = Tensor::zeros(&[b, l, l]);
                for bi in 0..b {
                    for i in 1..l {
                        let base = (bi * l + i) * l;
                        let a = &out.data()[base..base + i];
                        let ga = &g.data()[base..base + i];
                        let dot: f64 = a.iter().zip(ga).map(|(x, y)| x * y).sum();
                        for j in 0..i {
                            d.data_mut()[base + j] = a[j] * (ga[j] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let s = 2.0 * g.item() / ta.len() as f64;
                let d = zip_map(ta, tb, |x, y| s * (x - y));
                if self.ng(*b) {
                    self.accumulate(grads, *b, d.map(|v| -v));
                }
                self.accumulate(grads, *a, d);
            }
            Op::CrossEntropy { logits, probs, targets } => {
                let dims = self.dims(*logits).to_vec();
                let (k, inner) = (dims[1], dims[2..].iter().product::<usize>());
                let s = g.item() / targets.len() as f64;
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    let (ni, p) = (i / inner, i % inner);
                    d[(ni * k + t) * inner + p] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= s);
                self.accumulate(grads, *logits, Tensor::new(dims, d)?);
            }
            Op::StraightThrough(z_e) => self.accumulate(grads, *z_e, g.clone()),
            Op::Sum(x) => {
                let d = Tensor::full(self.dims(*x), g.item());
                self.accumulate(grads, *x, d);
            }
            Op::AvgPool2(x) => {
                let [n, c, h, w] = dims4(self.value(*x), "avg_pool2")?;
                let (oh, ow) = (h / 2, w / 2);
                let mut d = Tensor::zeros(&[n, c, h, w]);
                for plane in 0..n * c {
                    for y in 0..h {
                        for xx in 0..w {
                            d.data_mut()[(plane * h + y) * w + xx] = 0.25 * g.data()[(plane * oh + y / 2) * ow + xx / 2];
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::MeanSpatial(x) => {
                let dims = self.dims(*x).to_vec();
                let hw = dims[2] * dims[3];
                let mut d = Tensor::zeros(&dims);
                for (plane, chunk) in d.data_mut().chunks_mut(hw).enumerate() {
                    chunk.fill(g.data()[plane] / hw as f64);
                }
                self.accumulate(grads, *x, d);
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.dims().to_vec(), data).expect("zip_map operands share dims")
}

fn transpose_batched(src: &[f64], b: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for i in 0..m {
            for j in 0..n {
                out[(bi * n + j) * m + i] = src[(bi * m + i) * n + j];
            }
        }
    }
    out
}
