//! Reverse-mode tape.
//!
//! A [`Graph`] records every op eagerly: values are computed when the op is
//! pushed, and [`Graph::backward`] walks the tape in reverse accumulating
//! exact gradients. Build one graph per forward pass.

use std::collections::HashMap;

use crate::error::{invalid, shape_err, NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBroadcast { x: Var, b: Var },
    Scale { x: Var, c: T },
    Gelu { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<T>, rstd: Vec<T> },
    Conv1d { x: Var, w: Var, b: Var, stride: usize, padding: usize, cols: Vec<T> },
    Film { x: Var, scale: Var, shift: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Mse { a: Var, b: Var },
    Reshape { x: Var },
    Permute { x: Var, perm: [usize; 3] },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    MaxPool { x: Var, axis: usize, argmax: Vec<u32> },
    Expand { x: Var },
    SumAll { x: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddBroadcast { .. } => "add_broadcast",
            Op::Scale { .. } => "scale",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GroupNorm { .. } => "group_norm",
            Op::Conv1d { .. } => "conv1d",
            Op::Film { .. } => "film",
            Op::Attention { .. } => "attention",
            Op::Mse { .. } => "mse",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::MaxPool { .. } => "max_pool",
            Op::Expand { .. } => "expand",
            Op::SumAll { .. } => "sum",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    named: HashMap<String, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `c[m,n] (+)= op(a)[m,k] * op(b)[k,n]`, where `op` optionally transposes a
/// row-major operand in place via strides.
#[allow(clippy::too_many_arguments)]
fn mm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], a_t: bool, b: &[T], b_t: bool, c: &mut [T], accumulate: bool) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: slice lengths are checked by callers against m, k, n.
    unsafe {
        T::gemm(m, k, n, T::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// `tanh` through a single `exp`; several times cheaper than libm's `tanh`
/// and accurate to a few ulp over the range GELU sees.
#[inline]
fn fast_tanh<T: Scalar>(u: T) -> T {
    let e = (T::of(-2.0) * u.abs()).exp();
    let t = (T::one() - e) / (T::one() + e);
    if u < T::zero() {
        -t
    } else {
        t
    }
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + fast_tanh(c * (x + a * x * x * x)))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = fast_tanh(c * (x + a * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// Splits `shape` into `(outer, len, inner)` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), named: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(NnError::NonFinite { op: op.name() });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(NnError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn named_param(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<Var> {
        let v = self.leaf(value, trainable)?;
        self.named.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn named(&self, name: &str) -> Result<Var> {
        self.named.get(name).copied().ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn named_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.named.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    // ---------------------------------------------------------------- ops

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        mm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b }, &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape(), data)?;
        self.push(t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    /// `x + b`, with `b` broadcast over the leading dims of `x`; `b`'s shape
    /// must equal a suffix of `x`'s shape.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return shape_err("add_broadcast", sx, sb);
        }
        let vb = self.value(b).data();
        let nb = vb.len();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(nb) {
            for (o, &bv) in chunk.iter_mut().zip(vb) {
                *o += bv;
            }
        }
        let t = Tensor::new(self.shape(x), data)?;
        self.push(t, Op::AddBroadcast { x, b }, &[x, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale { x, c }, &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(gelu_fwd);
        self.push(t, Op::Gelu { x }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = *vx.shape().last().unwrap_or(&1);
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_row(row);
        }
        let t = Tensor::new(vx.shape(), data)?;
        self.push(t, Op::Softmax { x }, &[x])
    }

    /// Normalizes over the last axis with affine `gamma`, `beta` of that length.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err("layer_norm", &sx, self.shape(gamma));
        }
        let vx = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let rows = vx.len() / d.max(1);
        let mut out = vec![T::zero(); vx.len()];
        let mut xhat = vec![T::zero(); vx.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &vx[r * d..(r + 1) * d];
            let (mean, rs) = moments(row.iter().copied());
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + bt[j];
            }
        }
        let t = Tensor::new(&sx, out)?;
        self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Group normalization of `[B, C, L]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return invalid("group_norm", format!("expected [B, C, L], got {sx:?}"));
        }
        let (b, c, l) = (sx[0], sx[1], sx[2]);
        if groups == 0 || c % groups != 0 {
            return invalid("group_norm", format!("{c} channels not divisible into {groups} groups"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("group_norm", &sx, self.shape(gamma));
        }
        let cg = c / groups;
        let vx = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); vx.len()];
        let mut xhat = vec![T::zero(); vx.len()];
        let mut rstd = vec![T::zero(); b * groups];
        let span = cg * l;
        for bi in 0..b {
            for gi in 0..groups {
                let start = bi * c * l + gi * span;
                let seg = &vx[start..start + span];
                let (mean, rs) = moments(seg.iter().copied());
                rstd[bi * groups + gi] = rs;
                for (j, &v) in seg.iter().enumerate() {
                    let ch = gi * cg + j / l;
                    let xh = (v - mean) * rs;
                    xhat[start + j] = xh;
                    out[start + j] = xh * g[ch] + bt[ch];
                }
            }
        }
        let t = Tensor::new(&sx, out)?;
        self.push(t, Op::GroupNorm { x, gamma, beta, groups, xhat, rstd }, &[x, gamma, beta])
    }

    /// 1-D convolution: `x [B, Cin, L]`, `w [Cout, Cin, K]`, `b [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return shape_err("conv1d", &sx, &sw);
        }
        if self.shape(b) != [sw[0]] {
            return shape_err("conv1d", &sw, self.shape(b));
        }
        if stride == 0 {
            return invalid("conv1d", "stride must be > 0");
        }
        let (bs, cin, l) = (sx[0], sx[1], sx[2]);
        let (cout, kw) = (sw[0], sw[2]);
        if l + 2 * padding < kw {
            return invalid("conv1d", format!("kernel {kw} longer than padded input {l}+2*{padding}"));
        }
        let lout = (l + 2 * padding - kw) / stride + 1;
        let ck = cin * kw;
        let vx = self.value(x).data();
        let mut cols = vec![T::zero(); bs * lout * ck];
        for bi in 0..bs {
            for t in 0..lout {
                let row = &mut cols[(bi * lout + t) * ck..(bi * lout + t + 1) * ck];
                for ci in 0..cin {
                    for j in 0..kw {
                        let pos = (t * stride + j) as isize - padding as isize;
                        if pos >= 0 && (pos as usize) < l {
                            row[ci * kw + j] = vx[(bi * cin + ci) * l + pos as usize];
                        }
                    }
                }
            }
        }
        // y2[(b,t), o] = cols[(b,t), :] . w[o, :]
        let mut y2 = vec![T::zero(); bs * lout * cout];
        mm(bs * lout, ck, cout, &cols, false, self.value(w).data(), true, &mut y2, false);
        let vb = self.value(b).data();
        let mut out = vec![T::zero(); bs * cout * lout];
        for bi in 0..bs {
            for t in 0..lout {
                for o in 0..cout {
                    out[(bi * cout + o) * lout + t] = y2[(bi * lout + t) * cout + o] + vb[o];
                }
            }
        }
        let t = Tensor::new(&[bs, cout, lout], out)?;
        self.push(t, Op::Conv1d { x, w, b, stride, padding, cols }, &[x, w, b])
    }

    /// Feature-wise linear modulation: `scale ⊙ x + shift` for `x [B, C, L]`
    /// with `scale`, `shift` of shape `[B, C]` broadcast over `L`.
    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return invalid("film", format!("expected [B, C, L], got {sx:?}"));
        }
        let bc = [sx[0], sx[1]];
        if self.shape(scale) != bc {
            return shape_err("film", &sx, self.shape(scale));
        }
        if self.shape(shift) != bc {
            return shape_err("film", &sx, self.shape(shift));
        }
        let l = sx[2];
        let (vx, vs, vt) = (self.value(x).data(), self.value(scale).data(), self.value(shift).data());
        let mut out = vec![T::zero(); vx.len()];
        for (i, (o, xs)) in out.chunks_mut(l.max(1)).zip(vx.chunks(l.max(1))).enumerate() {
            for (oj, &xj) in o.iter_mut().zip(xs) {
                *oj = vs[i] * xj + vt[i];
            }
        }
        let t = Tensor::new(&sx, out)?;
        self.push(t, Op::Film { x, scale, shift }, &[x, scale, shift])
    }

    /// Multi-head scaled dot-product attention over `[B, T, D]` inputs.
    /// Heads split `D` into contiguous slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if sq.len() != 3 {
            return invalid("attention", format!("expected [B, T, D], got {sq:?}"));
        }
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (b, t, d) = (sq[0], sq[1], sq[2]);
        if heads == 0 || d % heads != 0 {
            return invalid("attention", format!("dim {d} not divisible by {heads} heads"));
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (vq, vk, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); b * heads * t * t];
        let mut out = vec![T::zero(); b * t * d];
        for bi in 0..b {
            for h in 0..heads {
                let off = bi * t * d + h * dh;
                let p = &mut probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                // SAFETY: strided views stay inside the [B, T, D] buffers.
                unsafe {
                    T::gemm(
                        t,
                        dh,
                        t,
                        scale,
                        vq.as_ptr().add(off),
                        d as isize,
                        1,
                        vk.as_ptr().add(off),
                        1,
                        d as isize,
                        T::zero(),
                        p.as_mut_ptr(),
                        t as isize,
                        1,
                    );
                }
                for row in p.chunks_mut(t) {
                    softmax_row(row);
                }
                unsafe {
                    T::gemm(
                        t,
                        t,
                        dh,
                        T::one(),
                        p.as_ptr(),
                        t as isize,
                        1,
                        vv.as_ptr().add(off),
                        d as isize,
                        1,
                        T::zero(),
                        out.as_mut_ptr().add(off),
                        d as isize,
                        1,
                    );
                }
            }
        }
        let tns = Tensor::new(&sq, out)?;
        self.push(tns, Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    /// Mean squared error, a `[1]` scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n = va.len().max(1);
        let s: f64 = va
            .iter()
            .zip(vb)
            .map(|(&x, &y)| {
                let d = (x - y).as_f64();
                d * d
            })
            .sum();
        self.push(Tensor::scalar(T::of(s / n as f64)), Op::Mse { a, b }, &[a, b])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(T::of(s)), Op::SumAll { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape { x }, &[x])
    }

    /// Permutes the axes of a rank-3 tensor: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: [usize; 3]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut sorted = perm;
        sorted.sort_unstable();
        if s.len() != 3 || sorted != [0, 1, 2] {
            return invalid("permute", format!("bad permutation {perm:?} for {s:?}"));
        }
        let out_shape = [s[perm[0]], s[perm[1]], s[perm[2]]];
        let strides = [s[1] * s[2], s[2], 1];
        let vx = self.value(x).data();
        let mut out = Vec::with_capacity(vx.len());
        for i in 0..out_shape[0] {
            for j in 0..out_shape[1] {
                for k in 0..out_shape[2] {
                    let src = i * strides[perm[0]] + j * strides[perm[1]] + k * strides[perm[2]];
                    out.push(vx[src]);
                }
            }
        }
        let t = Tensor::new(&out_shape, out)?;
        self.push(t, Op::Permute { x, perm }, &[x])
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => return invalid("concat", "no inputs"),
        };
        if axis >= first.len() {
            return invalid("concat", format!("axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return shape_err("concat", &first, s);
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut out = vec![T::zero(); outer * total * inner];
        let mut offset = 0;
        for &v in inputs {
            let len = self.shape(v)[axis];
            let data = self.value(v).data();
            for o in 0..outer {
                let src = &data[o * len * inner..(o + 1) * len * inner];
                let dst = o * total * inner + offset * inner;
                out[dst..dst + len * inner].copy_from_slice(src);
            }
            offset += len;
        }
        let t = Tensor::new(&out_shape, out)?;
        self.push(t, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return invalid("narrow", format!("range {start}+{len} on axis {axis} of {s:?}"));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let vx = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&vx[base..base + len * inner]);
        }
        let mut out_shape = s;
        out_shape[axis] = len;
        let t = Tensor::new(&out_shape, out)?;
        self.push(t, Op::Narrow { x, axis, start }, &[x])
    }

    /// Max over `axis`, which is removed from the shape. Ties go to the first index.
    pub fn max_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return invalid("max_pool", format!("axis {axis} of {s:?}"));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let vx = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = vec![0u32; outer * inner];
        for o in 0..outer {
            let base = o * n * inner;
            out[o * inner..(o + 1) * inner].copy_from_slice(&vx[base..base + inner]);
            for j in 1..n {
                let row = &vx[base + j * inner..base + (j + 1) * inner];
                for (i, &v) in row.iter().enumerate() {
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        argmax[o * inner + i] = j as u32;
                    }
                }
            }
        }
        let mut out_shape = s;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let t = Tensor::new(&out_shape, out)?;
        self.push(t, Op::MaxPool { x, axis, argmax }, &[x])
    }

    /// Repeats `x` along a new leading axis of length `n`.
    pub fn expand(&mut self, x: Var, n: usize) -> Result<Var> {
        let vx = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(vx.shape());
        let mut out = Vec::with_capacity(n * vx.numel());
        for _ in 0..n {
            out.extend_from_slice(vx.data());
        }
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::Expand { x }, &[x])
    }

    // ----------------------------------------------------------- backward

    /// Backpropagates from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return invalid("backward", format!("loss must have one element, got {:?}", self.shape(loss)));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.shape(loss), vec![T::one()])?);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(NnError::NonFinite { op: self.nodes[i].op.name() });
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(e) => e.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let like = |v: Var, data: Vec<T>| Tensor::new(self.shape(v), data).expect("grad shape");
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    mm(m, n, k, gd, false, self.value(*b).data(), true, &mut da, false);
                    acc(grads, *a, like(*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    mm(k, m, n, self.value(*a).data(), true, gd, false, &mut db, false);
                    acc(grads, *b, like(*b, db));
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let d = gd.iter().zip(vb).map(|(&g, &y)| g * y).collect();
                    acc(grads, *a, like(*a, d));
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(va).map(|(&g, &x)| g * x).collect();
                    acc(grads, *b, like(*b, d));
                }
            }
            Op::AddBroadcast { x, b } => {
                if self.wants(*x) {
                    acc(grads, *x, g.clone());
                }
                if self.wants(*b) {
                    let nb = self.value(*b).numel();
                    let mut db = vec![T::zero(); nb];
                    for chunk in gd.chunks(nb) {
                        for (d, &v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    acc(grads, *b, like(*b, db));
                }
            }
            Op::Scale { x, c } => {
                if self.wants(*x) {
                    acc(grads, *x, g.map(|v| v * *c));
                }
            }
            Op::Gelu { x } => {
                let vx = self.value(*x).data();
                let d = gd.iter().zip(vx).map(|(&g, &x)| g * gelu_grad(x)).collect();
                acc(grads, *x, like(*x, d));
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![T::zero(); y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(gd.chunks(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *x, like(*x, dx));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = *self.shape(*x).last().unwrap_or(&1);
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for (gr, xr) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                            db[j] += gr[j];
                        }
                    }
                    if self.wants(*gamma) {
                        acc(grads, *gamma, like(*gamma, dg));
                    }
                    if self.wants(*beta) {
                        acc(grads, *beta, like(*beta, db));
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    let mut dxh = vec![T::zero(); d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &gd[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxh[j] = gr[j] * gam[j];
                        }
                        norm_backward(&dxh, xr, *rs, &mut dx[r * d..(r + 1) * d]);
                    }
                    acc(grads, *x, like(*x, dx));
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                let s = self.shape(*x);
                let (b, c, l) = (s[0], s[1], s[2]);
                let cg = c / groups;
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for bi in 0..b {
                        for ch in 0..c {
                            let base = (bi * c + ch) * l;
                            for t in 0..l {
                                dg[ch] += gd[base + t] * xhat[base + t];
                                db[ch] += gd[base + t];
                            }
                        }
                    }
                    if self.wants(*gamma) {
                        acc(grads, *gamma, like(*gamma, dg));
                    }
                    if self.wants(*beta) {
                        acc(grads, *beta, like(*beta, db));
                    }
                }
                if self.wants(*x) {
                    let span = cg * l;
                    let mut dx = vec![T::zero(); gd.len()];
                    let mut dxh = vec![T::zero(); span];
                    for bi in 0..b {
                        for gi in 0..*groups {
                            let start = bi * c * l + gi * span;
                            for j in 0..span {
                                dxh[j] = gd[start + j] * gam[gi * cg + j / l];
                            }
                            norm_backward(
                                &dxh,
                                &xhat[start..start + span],
                                rstd[bi * groups + gi],
                                &mut dx[start..start + span],
                            );
                        }
                    }
                    acc(grads, *x, like(*x, dx));
                }
            }
            Op::Conv1d { x, w, b, stride, padding, cols } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (bs, cin, l) = (sx[0], sx[1], sx[2]);
                let (cout, kw) = (sw[0], sw[2]);
                let lout = node.value.shape()[2];
                let ck = cin * kw;
                let mut dy2 = vec![T::zero(); bs * lout * cout];
                for bi in 0..bs {
                    for o in 0..cout {
                        for t in 0..lout {
                            dy2[(bi * lout + t) * cout + o] = gd[(bi * cout + o) * lout + t];
                        }
                    }
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); cout];
                    for row in dy2.chunks(cout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(grads, *b, like(*b, db));
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); cout * ck];
                    mm(cout, bs * lout, ck, &dy2, true, cols, false, &mut dw, false);
                    acc(grads, *w, like(*w, dw));
                }
                if self.wants(*x) {
                    let mut dcols = vec![T::zero(); bs * lout * ck];
                    mm(bs * lout, cout, ck, &dy2, false, self.value(*w).data(), false, &mut dcols, false);
                    let mut dx = vec![T::zero(); bs * cin * l];
                    for bi in 0..bs {
                        for t in 0..lout {
                            let row = &dcols[(bi * lout + t) * ck..(bi * lout + t + 1) * ck];
                            for ci in 0..cin {
                                for j in 0..kw {
                                    let pos = (t * stride + j) as isize - *padding as isize;
                                    if pos >= 0 && (pos as usize) < l {
                                        dx[(bi * cin + ci) * l + pos as usize] += row[ci * kw + j];
                                    }
                                }
                            }
                        }
                    }
                    acc(grads, *x, like(*x, dx));
                }
            }
            Op::Film { x, scale, shift } => {
                let l = self.shape(*x)[2].max(1);
                let (vx, vs) = (self.value(*x).data(), self.value(*scale).data());
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); vx.len()];
                    for (i, (d, gr)) in dx.chunks_mut(l).zip(gd.chunks(l)).enumerate() {
                        for (dj, &gj) in d.iter_mut().zip(gr) {
                            *dj = gj * vs[i];
                        }
                    }
                    acc(grads, *x, like(*x, dx));
                }
                if self.wants(*scale) {
                    let d = gd
                        .chunks(l)
                        .zip(vx.chunks(l))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(&a, &b)| a * b).sum())
                        .collect();
                    acc(grads, *scale, like(*scale, d));
                }
                if self.wants(*shift) {
                    let d = gd.chunks(l).map(|gr| gr.iter().copied().sum()).collect();
                    acc(grads, *shift, like(*shift, d));
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let s = self.shape(*q);
                let (b, t, d) = (s[0], s[1], s[2]);
                let dh = d / heads;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let (vq, vk, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![T::zero(); vq.len()];
                let mut dk = vec![T::zero(); vk.len()];
                let mut dv = vec![T::zero(); vv.len()];
                let mut ds = vec![T::zero(); t * t];
                for bi in 0..b {
                    for h in 0..*heads {
                        let off = bi * t * d + h * dh;
                        let p = &probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                        // SAFETY: strided views stay inside the [B, T, D] buffers.
                        unsafe {
                            // dV += P^T dO
                            T::gemm(
                                t,
                                t,
                                dh,
                                T::one(),
                                p.as_ptr(),
                                1,
                                t as isize,
                                gd.as_ptr().add(off),
                                d as isize,
                                1,
                                T::one(),
                                dv.as_mut_ptr().add(off),
                                d as isize,
                                1,
                            );
                            // dP = dO V^T
                            T::gemm(
                                t,
                                dh,
                                t,
                                T::one(),
                                gd.as_ptr().add(off),
                                d as isize,
                                1,
                                vv.as_ptr().add(off),
                                1,
                                d as isize,
                                T::zero(),
                                ds.as_mut_ptr(),
                                t as isize,
                                1,
                            );
                        }
                        for (dr, pr) in ds.chunks_mut(t).zip(p.chunks(t)) {
                            let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                            for j in 0..t {
                                dr[j] = pr[j] * (dr[j] - dot);
                            }
                        }
                        unsafe {
                            // dQ += dS K * scale
                            T::gemm(
                                t,
                                t,
                                dh,
                                scale,
                                ds.as_ptr(),
                                t as isize,
                                1,
                                vk.as_ptr().add(off),
                                d as isize,
                                1,
                                T::one(),
                                dq.as_mut_ptr().add(off),
                                d as isize,
                                1,
                            );
                            // dK += dS^T Q * scale
                            T::gemm(
                                t,
                                t,
                                dh,
                                scale,
                                ds.as_ptr(),
                                1,
                                t as isize,
                                vq.as_ptr().add(off),
                                d as isize,
                                1,
                                T::one(),
                                dk.as_mut_ptr().add(off),
                                d as isize,
                                1,
                            );
                        }
                    }
                }
                if self.wants(*q) {
                    acc(grads, *q, like(*q, dq));
                }
                if self.wants(*k) {
                    acc(grads, *k, like(*k, dk));
                }
                if self.wants(*v) {
                    acc(grads, *v, like(*v, dv));
                }
            }
            Op::Mse { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let c = gd[0] * T::of(2.0 / va.len().max(1) as f64);
                let da: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| c * (x - y)).collect();
                if self.wants(*b) {
                    acc(grads, *b, like(*b, da.iter().map(|&v| -v).collect()));
                }
                if self.wants(*a) {
                    acc(grads, *a, like(*a, da));
                }
            }
            Op::SumAll { x } => {
                let n = self.value(*x).numel();
                acc(grads, *x, like(*x, vec![gd[0]; n]));
            }
            Op::Reshape { x } => {
                acc(grads, *x, like(*x, gd.to_vec()));
            }
            Op::Permute { x, perm } => {
                let s = self.shape(*x);
                let out_shape = node.value.shape();
                let strides = [s[1] * s[2], s[2], 1];
                let mut dx = vec![T::zero(); gd.len()];
                let mut idx = 0;
                for i in 0..out_shape[0] {
                    for j in 0..out_shape[1] {
                        for k in 0..out_shape[2] {
                            dx[i * strides[perm[0]] + j * strides[perm[1]] + k * strides[perm[2]]] = gd[idx];
                            idx += 1;
                        }
                    }
                }
                acc(grads, *x, like(*x, dx));
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            d.extend_from_slice(&gd[src..src + len * inner]);
                        }
                        acc(grads, v, like(v, d));
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let s = self.shape(*x);
                let (outer, n, inner) = split_axis(s, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    dx[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                acc(grads, *x, like(*x, dx));
            }
            Op::MaxPool { x, axis, argmax } => {
                let s = self.shape(*x);
                let (outer, n, inner) = split_axis(s, *axis);
                let mut dx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let j = argmax[o * inner + i] as usize;
                        dx[o * n * inner + j * inner + i] += gd[o * inner + i];
                    }
                }
                acc(grads, *x, like(*x, dx));
            }
            Op::Expand { x } => {
                let n = self.value(*x).numel();
                let mut dx = vec![T::zero(); n];
                for chunk in gd.chunks(n) {
                    for (d, &v) in dx.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                acc(grads, *x, like(*x, dx));
            }
        }
    }
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Mean and reciprocal standard deviation (biased variance).
fn moments<T: Scalar>(xs: impl Iterator<Item = T> + Clone) -> (T, T) {
    let mut n = 0usize;
    let mut s = 0.0f64;
    for x in xs.clone() {
        s += x.as_f64();
        n += 1;
    }
    let mean = s / n.max(1) as f64;
    let var = xs
        .map(|x| {
            let d = x.as_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n.max(1) as f64;
    (T::of(mean), T::of(1.0 / (var + NORM_EPS).sqrt()))
}

/// Input gradient of `xhat = (x - mean) * rstd` given `dxhat`.
fn norm_backward<T: Scalar>(dxhat: &[T], xhat: &[T], rstd: T, dx: &mut [T]) {
    let n = T::of(dxhat.len() as f64);
    let sum_d: T = dxhat.iter().copied().sum();
    let sum_dx: T = dxhat.iter().zip(xhat).map(|(&a, &b)| a * b).sum();
    for j in 0..dxhat.len() {
        dx[j] = rstd / n * (n * dxhat[j] - sum_d - xhat[j] * sum_dx);
    }
}
