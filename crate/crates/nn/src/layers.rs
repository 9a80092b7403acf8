//! Parameterized building blocks. Each layer only holds parameter names; the
//! tensors live in a [`ParamStore`] and are bound into a [`Graph`] per pass.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::params::{kaiming_uniform, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn join(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weight stored as `[in, out]` so `y = x W + b`.
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let layer = Self::named(prefix, in_dim, out_dim);
        store.insert(&layer.weight, kaiming_uniform(&[in_dim, out_dim], in_dim, rng));
        store.insert(&layer.bias, kaiming_uniform(&[out_dim], in_dim, rng));
        layer
    }

    pub fn named(prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Self { weight: join(prefix, "weight"), bias: join(prefix, "bias"), in_dim, out_dim }
    }

    /// Applies to the last axis of `x`; leading axes are flattened and restored.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let last = *shape.last().unwrap_or(&0);
        if last != self.in_dim {
            return invalid("linear", format!("expected last dim {}, got {shape:?}", self.in_dim));
        }
        let rows = shape.iter().product::<usize>() / last.max(1);
        let x2 = if shape.len() == 2 { x } else { g.reshape(x, &[rows, last])? };
        let w = g.named(&self.weight)?;
        let b = g.named(&self.bias)?;
        let y = g.matmul(x2, w)?;
        let y = g.add_broadcast(y, b)?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.out_dim;
            g.reshape(y, &out)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: String,
    pub bias: String,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let layer = Self { weight: join(prefix, "weight"), bias: join(prefix, "bias"), stride, padding };
        let fan_in = in_ch * kernel;
        store.insert(&layer.weight, kaiming_uniform(&[out_ch, in_ch, kernel], fan_in, rng));
        store.insert(&layer.bias, kaiming_uniform(&[out_ch], fan_in, rng));
        layer
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.named(&self.weight)?;
        let b = g.named(&self.bias)?;
        g.conv1d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: String,
    pub beta: String,
    pub groups: usize,
}

impl GroupNorm {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize, groups: usize) -> Self {
        let layer = Self { gamma: join(prefix, "gamma"), beta: join(prefix, "beta"), groups };
        store.insert(&layer.gamma, Tensor::full(&[channels], T::one()));
        store.insert(&layer.beta, Tensor::zeros(&[channels]));
        layer
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gamma = g.named(&self.gamma)?;
        let beta = g.named(&self.beta)?;
        g.group_norm(x, gamma, beta, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Self {
        let layer = Self { gamma: join(prefix, "gamma"), beta: join(prefix, "beta") };
        store.insert(&layer.gamma, Tensor::full(&[dim], T::one()));
        store.insert(&layer.beta, Tensor::zeros(&[dim]));
        layer
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gamma = g.named(&self.gamma)?;
        let beta = g.named(&self.beta)?;
        g.layer_norm(x, gamma, beta)
    }
}

/// Self-attention with separate q/k/v/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::init(store, &join(prefix, "q"), dim, dim, rng),
            k: Linear::init(store, &join(prefix, "k"), dim, dim, rng),
            v: Linear::init(store, &join(prefix, "v"), dim, dim, rng),
            out: Linear::init(store, &join(prefix, "out"), dim, dim, rng),
            heads,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let a = g.attention(q, k, v, self.heads)?;
        self.out.forward(g, a)
    }
}

/// Projection from a conditioning vector to per-channel FiLM `(scale, shift)`.
/// Initialized so that modulation starts as the identity: zero weights, unit
/// scale bias, zero shift bias.
#[derive(Clone, Debug)]
pub struct FilmProjection {
    pub proj: Linear,
    pub channels: usize,
}

impl FilmProjection {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cond_dim: usize, channels: usize) -> Self {
        let proj = Linear::named(prefix, cond_dim, 2 * channels);
        store.insert(&proj.weight, Tensor::zeros(&[cond_dim, 2 * channels]));
        let bias = Tensor::from_fn(&[2 * channels], |i| if i < channels { T::one() } else { T::zero() });
        store.insert(&proj.bias, bias);
        Self { proj, channels }
    }

    /// Returns `(scale, shift)`, each `[B, channels]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, cond: Var) -> Result<(Var, Var)> {
        let p = self.proj.forward(g, cond)?;
        let scale = g.narrow(p, 1, 0, self.channels)?;
        let shift = g.narrow(p, 1, self.channels, self.channels)?;
        Ok((scale, shift))
    }
}
