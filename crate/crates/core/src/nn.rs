//! Named parameter storage and the layer helpers shared by every model.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Gradients, Graph, Optimizer, Tensor, Var};

/// Ordered name -> tensor map. Iteration order is lexicographic, which keeps
/// parameter updates and serialization deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

/// Uniform He-style fan-in initialization.
pub fn he_uniform(dims: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(dims, |_| rng.random_range(-bound..bound))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Registers `name.w` `[o, c, kh, kw]` and `name.b` `[o]`.
    pub fn add_conv(&mut self, name: &str, o: usize, c: usize, kh: usize, kw: usize, rng: &mut ChaCha8Rng) {
        self.insert(format!("{name}.w"), he_uniform(&[o, c, kh, kw], c * kh * kw, rng));
        self.insert(format!("{name}.b"), Tensor::zeros(&[o]));
    }

    /// Copies every entry under `prefix.` out, with the prefix stripped.
    pub fn with_prefix_stripped(&self, prefix: &str) -> ParamStore {
        let head = format!("{prefix}.");
        ParamStore {
            params: self
                .params
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&head).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn prefixed(&self, prefix: &str) -> impl Iterator<Item = (String, &Tensor)> + '_ {
        let prefix = prefix.to_string();
        self.params.iter().map(move |(k, v)| (format!("{prefix}.{k}"), v))
    }

    /// Checks that `other` has the same names and dims.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (k, v) in &self.params {
            let o = other.get(k)?;
            if o.dims() != v.dims() {
                return Err(Error::Config(format!("parameter '{k}' has dims {:?}, expected {:?}", o.dims(), v.dims())));
            }
        }
        Ok(())
    }

    /// Puts every parameter on `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.params {
            vars.insert(k.clone(), g.leaf(v.clone(), trainable)?);
        }
        Ok(Bound { vars })
    }

    /// Clips the global gradient norm to `clip` (if given) and takes one Adam
    /// step per parameter. Returns the pre-clip norm.
    pub fn apply_gradients(
        &mut self,
        bound: &Bound,
        grads: &Gradients,
        opt: &mut Optimizer,
        clip: Option<f64>,
    ) -> Result<f64> {
        let mut collected = Vec::with_capacity(self.params.len());
        let mut sq = 0.0;
        for (name, var) in &bound.vars {
            let dims = self.get(name)?.dims().to_vec();
            let gt = grads.get_or_zeros(*var, &dims);
            sq += gt.sq_norm();
            collected.push((name.clone(), gt));
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {norm}")));
        }
        let factor = match clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (name, mut gt) in collected {
            if factor != 1.0 {
                gt.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
            let p = self.params.get_mut(&name).expect("bound names come from this store");
            opt.step(&name, p, &gt)?;
        }
        Ok(norm)
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter '{name}' is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Points `name` at another graph node, e.g. a probe input.
    pub fn replace(&mut self, name: &str, var: Var) -> Result<()> {
        match self.vars.get_mut(name) {
            Some(v) => {
                *v = var;
                Ok(())
            }
            None => Err(Error::Config(format!("parameter '{name}' is not bound"))),
        }
    }
}

/// Convolution with bias using parameters `name.w` / `name.b`.
pub fn conv(g: &mut Graph, p: &Bound, name: &str, x: Var, spec: ConvSpec) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = g.conv2d(x, w, spec)?;
    g.add_channel_bias(y, b)
}

/// Same-padded stride-1 convolution, kernel size taken from the weights.
pub fn conv_same(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let (kh, kw) = (g.dims(w)[2], g.dims(w)[3]);
    conv(g, p, name, x, ConvSpec::same(kh, kw))
}

/// `x + conv1x1(relu(conv3x3(relu(x))))`.
pub fn residual_block(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = g.relu(x)?;
    let h = conv_same(g, p, &format!("{name}.conv1"), h)?;
    let h = g.relu(h)?;
    let h = conv_same(g, p, &format!("{name}.conv2"), h)?;
    g.add(x, h)
}

pub fn add_residual_block(store: &mut ParamStore, name: &str, ch: usize, rng: &mut ChaCha8Rng) {
    store.add_conv(&format!("{name}.conv1"), ch, ch, 3, 3, rng);
    store.add_conv(&format!("{name}.conv2"), ch, ch, 1, 1, rng);
}
