//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse, accumulating gradients into
//! every node that depends on a leaf created with [`Graph::leaf`]. Graphs are
//! cheap to build and are rebuilt for every optimizer step.

use std::sync::Arc;

use super::tensor::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A tensor viewed as `[outer, n, inner]` around one axis.
#[derive(Debug, Clone, Copy)]
struct AxisView {
    outer: usize,
    n: usize,
    inner: usize,
}

impl AxisView {
    fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: numel(&shape[..axis]),
            n: shape[axis],
            inner: numel(&shape[axis + 1..]),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv3dGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl Conv3dGeom {
    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel.iter().product::<usize>()
    }

    fn col_cols(&self) -> usize {
        self.output.iter().product()
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBroadcast { x: Var, b: Var, view: AxisView },
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool, shared_b: bool },
    Conv3d { x: Var, w: Var, geom: Conv3dGeom, col: Vec<T> },
    Reshape(Var),
    Gather { x: Var, index: Arc<[u32]> },
    LayerNorm { x: Var, gamma: Var, beta: Var, view: AxisView, xhat: Vec<T>, rstd: Vec<T> },
    SampleNorm { x: Var, gamma: Var, beta: Var, view: AxisView, xhat: Vec<T>, rstd: Vec<T> },
    Relu(Var),
    Gelu(Var),
    Softmax { x: Var, n: usize },
    MeanAxis { x: Var, view: AxisView },
    SumAll(Var),
    Concat { parts: Vec<Var>, outer: usize, inner: usize, sizes: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T>, classes: usize },
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.data, t.shape, Op::Leaf, false)
    }

    /// Differentiable input (a parameter or a checked input).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t.data, t.shape, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.value(v).to_vec(),
        }
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Fails if `v` holds a NaN or infinity.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, self.shape(a).to_vec(), Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, self.shape(a).to_vec(), Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let value = self.value(a).iter().map(|&x| x * s).collect();
        let ng = self.needs(a);
        self.push(value, self.shape(a).to_vec(), Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| x.max(T::zero())).collect();
        let ng = self.needs(a);
        self.push(value, self.shape(a).to_vec(), Op::Relu(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::from_f64(GELU_C);
        let k = T::from_f64(GELU_K);
        let half = T::from_f64(0.5);
        let value = self
            .value(a)
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let ng = self.needs(a);
        self.push(value, self.shape(a).to_vec(), Op::Gelu(a), ng)
    }

    // ---- broadcasting ------------------------------------------------------

    /// `x + b` where `b`'s shape equals the trailing dims of `x` (e.g. a bias).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(Error::shape("add_bias", xs, bs));
        }
        let n = numel(bs);
        let view = AxisView {
            outer: numel(xs) / n.max(1),
            n,
            inner: 1,
        };
        Ok(self.add_broadcast(x, b, view))
    }

    /// `x + b[c]` for `x` of shape `[C, ...]` and `b` of shape `[C]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.add_axis_bias(x, b, 0)
    }

    /// `x + b[i]` where `i` indexes `axis` of `x` and `b` has shape `[x.shape[axis]]`.
    pub fn add_axis_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x);
        if axis >= xs.len() || self.shape(b) != [xs[axis]] {
            return Err(Error::shape("add_axis_bias", xs, self.shape(b)));
        }
        let view = AxisView::of(xs, axis);
        Ok(self.add_broadcast(x, b, view))
    }

    fn add_broadcast(&mut self, x: Var, b: Var, view: AxisView) -> Var {
        let mut value = self.value(x).to_vec();
        let bv = self.value(b);
        for o in 0..view.outer {
            for j in 0..view.n {
                let base = (o * view.n + j) * view.inner;
                for v in &mut value[base..base + view.inner] {
                    *v += bv[j];
                }
            }
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(value, self.shape(x).to_vec(), Op::AddBroadcast { x, b, view }, ng)
    }

    // ---- linear algebra ----------------------------------------------------

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() < 2 || bs.len() < 2 {
            return Err(Error::shape(op, &as_, &bs));
        }
        let (m, k) = (as_[as_.len() - 2], as_[as_.len() - 1]);
        let (bk, n) = if trans_b {
            (bs[bs.len() - 1], bs[bs.len() - 2])
        } else {
            (bs[bs.len() - 2], bs[bs.len() - 1])
        };
        let batch_dims = &as_[..as_.len() - 2];
        let shared_b = bs.len() == 2 && !batch_dims.is_empty();
        if bk != k || (!shared_b && bs[..bs.len() - 2] != *batch_dims) {
            return Err(Error::shape(op, &as_, &bs));
        }
        let batch = numel(batch_dims);
        let mut value = vec![T::zero(); batch * m * n];
        let b_strides = if trans_b { (1, k) } else { (n, 1) };
        for bi in 0..batch {
            let av = &self.nodes[a.0].value[bi * m * k..(bi + 1) * m * k];
            let boff = if shared_b { 0 } else { bi * k * n };
            let bv = &self.nodes[b.0].value[boff..boff + k * n];
            T::gemm(m, k, n, av, (k, 1), bv, b_strides, T::zero(), &mut value[bi * m * n..(bi + 1) * m * n]);
        }
        let mut shape = batch_dims.to_vec();
        shape.extend([m, n]);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            value,
            shape,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
                shared_b,
            },
            ng,
        ))
    }

    /// `a @ b` for `a: [..., M, K]` and `b: [..., K, N]` or a shared `b: [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` for `a: [..., M, K]` and `b: [..., N, K]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// `x @ w + b` with `w: [in, out]` and `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    // ---- convolution -------------------------------------------------------

    /// 3-D convolution of `x: [Cin, D, H, W]` (or batched `[B, Cin, D, H, W]`)
    /// with `w: [Cout, Cin, kd, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, w: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let xs_full = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (batch, xs) = match xs_full.len() {
            4 => (None, &xs_full[..]),
            5 => (Some(xs_full[0]), &xs_full[1..]),
            _ => return Err(Error::shape("conv3d", &xs_full, &ws)),
        };
        if ws.len() != 5 || ws[1] != xs[0] || stride.contains(&0) {
            return Err(Error::shape("conv3d", &xs_full, &ws));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = xs[a + 1] + 2 * pad[a];
            if padded < ws[a + 2] {
                return Err(Error::shape("conv3d", &xs_full, &ws));
            }
            output[a] = (padded - ws[a + 2]) / stride[a] + 1;
        }
        let geom = Conv3dGeom {
            batch: batch.unwrap_or(1),
            in_ch: xs[0],
            out_ch: ws[0],
            input: [xs[1], xs[2], xs[3]],
            kernel: [ws[2], ws[3], ws[4]],
            stride,
            pad,
            output,
        };
        let (kr, p) = (geom.col_rows(), geom.col_cols());
        let in_len = geom.in_ch * geom.input.iter().product::<usize>();
        let mut col = vec![T::zero(); geom.batch * kr * p];
        let mut value = vec![T::zero(); geom.batch * geom.out_ch * p];
        for b in 0..geom.batch {
            let cb = &mut col[b * kr * p..(b + 1) * kr * p];
            im2col(&self.nodes[x.0].value[b * in_len..(b + 1) * in_len], &geom, cb);
            let out = &mut value[b * geom.out_ch * p..(b + 1) * geom.out_ch * p];
            T::gemm(geom.out_ch, kr, p, self.value(w), (kr, 1), cb, (p, 1), T::zero(), out);
        }
        let ng = self.needs(x) || self.needs(w);
        let mut shape: Vec<usize> = batch.into_iter().collect();
        shape.extend([geom.out_ch, output[0], output[1], output[2]]);
        Ok(self.push(value, shape, Op::Conv3d { x, w, geom, col }, ng))
    }

    /// 2-D convolution of `x: [Cin, H, W]` with `w: [Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: [usize; 2], pad: [usize; 2]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let x4 = self.reshape(x, &[xs[0], 1, xs[1], xs[2]])?;
        let w5 = self.reshape(w, &[ws[0], ws[1], 1, ws[2], ws[3]])?;
        let y = self.conv3d(x4, w5, [1, stride[0], stride[1]], [0, pad[0], pad[1]])?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[2], ys[3]])
    }

    /// 1-D convolution of `x: [Cin, L]` with `w: [Cout, Cin, k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 3 {
            return Err(Error::shape("conv1d", &xs, &ws));
        }
        let x4 = self.reshape(x, &[xs[0], xs[1], 1, 1])?;
        let w5 = self.reshape(w, &[ws[0], ws[1], ws[2], 1, 1])?;
        let y = self.conv3d(x4, w5, [stride, 1, 1], [pad, 0, 0])?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[1]])
    }

    // ---- indexing ----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(value, shape.to_vec(), Op::Reshape(x), ng))
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[u32]>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if numel(shape) != index.len() || index.iter().any(|&i| i as usize >= n) {
            return Err(Error::shape("gather", self.shape(x), shape));
        }
        let xv = self.value(x);
        let value = index.iter().map(|&i| xv[i as usize]).collect();
        let ng = self.needs(x);
        Ok(self.push(value, shape.to_vec(), Op::Gather { x, index }, ng))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if perm.len() != shape.len() {
            return Err(Error::shape("permute", &shape, perm));
        }
        let (index, out_shape) = permute_index(&shape, perm);
        self.gather(x, index.into(), &out_shape)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::shape("concat", &first, s));
            }
            sizes.push(s[axis]);
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let total: usize = sizes.iter().sum();
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&sizes) {
                value.extend_from_slice(&self.value(p)[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            value,
            shape,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
                sizes,
            },
            ng,
        ))
    }

    // ---- normalization and reductions --------------------------------------

    fn layer_norm_impl(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let n = xs[axis];
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape("layer_norm", &xs, self.shape(gamma)));
        }
        let view = AxisView::of(&xs, axis);
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut value = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); view.outer * view.inner];
        // Statistics in f64 so large offsets do not leak into f32 outputs.
        for o in 0..view.outer {
            for i in 0..view.inner {
                let at = |j: usize| (o * n + j) * view.inner + i;
                let mean = (0..n).map(|j| xv[at(j)].to_f64()).sum::<f64>() / n as f64;
                let var = (0..n).map(|j| (xv[at(j)].to_f64() - mean).powi(2)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + eps).sqrt();
                rstd[o * view.inner + i] = T::from_f64(r);
                for j in 0..n {
                    let h = T::from_f64((xv[at(j)].to_f64() - mean) * r);
                    xhat[at(j)] = h;
                    value[at(j)] = h * g[j] + b[j];
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            xs,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                view,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Normalizes over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let axis = self.shape(x).len().checked_sub(1).ok_or_else(|| Error::shape("layer_norm", &[], &[]))?;
        self.layer_norm_impl(x, gamma, beta, axis, eps)
    }

    /// Normalizes over the leading (channel) dimension at every position.
    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.layer_norm_axis(x, gamma, beta, 0, eps)
    }

    /// Normalizes over `axis` at every position of the other axes.
    pub fn layer_norm_axis(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, eps: f64) -> Result<Var> {
        if axis >= self.shape(x).len() {
            return Err(Error::shape("layer_norm_axis", self.shape(x), &[axis]));
        }
        self.layer_norm_impl(x, gamma, beta, axis, eps)
    }

    /// Normalizes each sample of `[B, C, ...]` over all of its elements, with
    /// a per-channel affine on axis 1.
    pub fn layer_norm_sample(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(Error::shape("layer_norm_sample", &xs, self.shape(gamma)));
        }
        let view = AxisView::of(&xs, 1);
        let per = view.n * view.inner;
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut value = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); view.outer];
        for o in 0..view.outer {
            let s = &xv[o * per..(o + 1) * per];
            let mean = s.iter().map(|&v| Scalar::to_f64(v)).sum::<f64>() / per as f64;
            let var = s.iter().map(|&v| (Scalar::to_f64(v) - mean).powi(2)).sum::<f64>() / per as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[o] = T::from_f64(r);
            for (k, v) in s.iter().enumerate() {
                let c = k / view.inner;
                let h = T::from_f64((Scalar::to_f64(*v) - mean) * r);
                xhat[o * per + k] = h;
                value[o * per + k] = h * g[c] + b[c];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            xs,
            Op::SampleNorm {
                x,
                gamma,
                beta,
                view,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("softmax", &[], &[]))?;
        let xv = self.value(x);
        let mut value = vec![T::zero(); xv.len()];
        for (row, out) in xv.chunks(n).zip(value.chunks_mut(n)) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - m).exp();
                s += *o;
            }
            for o in out.iter_mut() {
                *o = *o / s;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(value, shape, Op::Softmax { x, n }, ng))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("mean_axis", &shape, &[axis]));
        }
        let view = AxisView::of(&shape, axis);
        let xv = self.value(x);
        let inv = T::one() / T::from_f64(view.n as f64);
        let mut value = vec![T::zero(); view.outer * view.inner];
        for o in 0..view.outer {
            for j in 0..view.n {
                let src = &xv[(o * view.n + j) * view.inner..(o * view.n + j + 1) * view.inner];
                for (d, &s) in value[o * view.inner..(o + 1) * view.inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for v in &mut value {
            *v *= inv;
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let ng = self.needs(x);
        Ok(self.push(value, out_shape, Op::MeanAxis { x, view }, ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<T>();
        let ng = self.needs(x);
        self.push(vec![s], vec![], Op::SumAll(x), ng)
    }

    /// Mean cross-entropy of `logits: [B, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); lv.len()];
        let mut loss = T::zero();
        for ((row, p), &label) in lv.chunks(classes).zip(probs.chunks_mut(classes)).zip(labels) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for (pi, &v) in p.iter_mut().zip(row) {
                *pi = (v - m).exp();
                s += *pi;
            }
            for pi in p.iter_mut() {
                *pi = *pi / s;
            }
            loss += s.ln() + m - row[label];
        }
        loss = loss / T::from_f64(labels.len() as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            vec![loss],
            vec![],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                classes,
            },
            ng,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[]));
        }
        self.backward_with(loss, vec![T::one()])
    }

    /// Back-propagates an explicit upstream gradient for `root`.
    pub fn backward_with(&mut self, root: Var, seed: Vec<T>) -> Result<()> {
        if seed.len() != self.value(root).len() {
            return Err(Error::shape("backward_with", self.shape(root), &[seed.len()]));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        // Values may be temporarily moved out during backprop; use the shape.
        let len = numel(&self.nodes[v.0].shape);
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        // Temporarily move the op out so inputs can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.acc(v) {
                        add_into(ga, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                if let Some(ga) = self.acc(*a) {
                    for ((d, &gg), &y) in ga.iter_mut().zip(g).zip(&bv) {
                        *d += gg * y;
                    }
                }
                if let Some(gb) = self.acc(*b) {
                    for ((d, &gg), &x) in gb.iter_mut().zip(g).zip(&av) {
                        *d += gg * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                if let Some(ga) = self.acc(*a) {
                    for (d, &gg) in ga.iter_mut().zip(g) {
                        *d += gg * s;
                    }
                }
            }
            Op::AddBroadcast { x, b, view } => {
                if let Some(gx) = self.acc(*x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.acc(*b) {
                    for o in 0..view.outer {
                        for j in 0..view.n {
                            let base = (o * view.n + j) * view.inner;
                            gb[j] += g[base..base + view.inner].iter().copied().sum::<T>();
                        }
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
                shared_b,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if self.needs(*a) {
                    let bv = std::mem::take(&mut self.nodes[b.0].value);
                    let ga = self.acc(*a).expect("needs grad");
                    // dA = dC @ B^T
                    let bt_strides = if *trans_b { (k, 1) } else { (1, n) };
                    for bi in 0..batch {
                        let boff = if *shared_b { 0 } else { bi * k * n };
                        T::gemm(m, n, k, &g[bi * m * n..(bi + 1) * m * n], (n, 1), &bv[boff..boff + k * n], bt_strides, T::one(), &mut ga[bi * m * k..(bi + 1) * m * k]);
                    }
                    self.nodes[b.0].value = bv;
                }
                if self.needs(*b) {
                    let av = std::mem::take(&mut self.nodes[a.0].value);
                    let gb = self.acc(*b).expect("needs grad");
                    for bi in 0..batch {
                        let boff = if *shared_b { 0 } else { bi * k * n };
                        let gslice = &g[bi * m * n..(bi + 1) * m * n];
                        let aslice = &av[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            // dB[n, k] = dC^T @ A
                            T::gemm(n, m, k, gslice, (1, n), aslice, (k, 1), T::one(), &mut gb[boff..boff + k * n]);
                        } else {
                            // dB[k, n] = A^T @ dC
                            T::gemm(k, m, n, aslice, (1, k), gslice, (n, 1), T::one(), &mut gb[boff..boff + k * n]);
                        }
                    }
                    self.nodes[a.0].value = av;
                }
            }
            Op::Conv3d { x, w, geom, col } => {
                let (kr, p) = (geom.col_rows(), geom.col_cols());
                let out_len = geom.out_ch * p;
                if let Some(gw) = self.acc(*w) {
                    // dW[Cout, K] += dOut[Cout, P] @ col^T
                    for b in 0..geom.batch {
                        T::gemm(geom.out_ch, p, kr, &g[b * out_len..(b + 1) * out_len], (p, 1), &col[b * kr * p..(b + 1) * kr * p], (1, p), T::one(), gw);
                    }
                }
                if self.needs(*x) {
                    let wv = std::mem::take(&mut self.nodes[w.0].value);
                    let in_len = geom.in_ch * geom.input.iter().product::<usize>();
                    let mut dcol = vec![T::zero(); kr * p];
                    let gx = self.acc(*x).expect("needs grad");
                    for b in 0..geom.batch {
                        // dcol[K, P] = W^T @ dOut
                        T::gemm(kr, geom.out_ch, p, &wv, (1, kr), &g[b * out_len..(b + 1) * out_len], (p, 1), T::zero(), &mut dcol);
                        col2im(&dcol, geom, &mut gx[b * in_len..(b + 1) * in_len]);
                    }
                    self.nodes[w.0].value = wv;
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(*x) {
                    add_into(gx, g);
                }
            }
            Op::Gather { x, index } => {
                if let Some(gx) = self.acc(*x) {
                    for (&ix, &gg) in index.iter().zip(g) {
                        gx[ix as usize] += gg;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                view,
                xhat,
                rstd,
            } => {
                let n = view.n;
                let inner = view.inner;
                let gam = self.nodes[gamma.0].value.clone();
                if let Some(gg) = self.acc(*gamma) {
                    for (idx, (&d, &h)) in g.iter().zip(xhat).enumerate() {
                        gg[(idx / inner) % n] += d * h;
                    }
                }
                if let Some(gb) = self.acc(*beta) {
                    for (idx, &d) in g.iter().enumerate() {
                        gb[(idx / inner) % n] += d;
                    }
                }
                if let Some(gx) = self.acc(*x) {
                    let inv_n = T::one() / T::from_f64(n as f64);
                    for o in 0..view.outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let mut mean_d = T::zero();
                            let mut mean_dh = T::zero();
                            for j in 0..n {
                                let d = g[at(j)] * gam[j];
                                mean_d += d;
                                mean_dh += d * xhat[at(j)];
                            }
                            mean_d = mean_d * inv_n;
                            mean_dh = mean_dh * inv_n;
                            let r = rstd[o * inner + i];
                            for j in 0..n {
                                let d = g[at(j)] * gam[j];
                                gx[at(j)] += r * (d - mean_d - xhat[at(j)] * mean_dh);
                            }
                        }
                    }
                }
            }
            Op::SampleNorm {
                x,
                gamma,
                beta,
                view,
                xhat,
                rstd,
            } => {
                let (n, inner) = (view.n, view.inner);
                let per = n * inner;
                let gam = self.nodes[gamma.0].value.clone();
                if let Some(gg) = self.acc(*gamma) {
                    for (idx, (&d, &h)) in g.iter().zip(xhat).enumerate() {
                        gg[(idx / inner) % n] += d * h;
                    }
                }
                if let Some(gb) = self.acc(*beta) {
                    for (idx, &d) in g.iter().enumerate() {
                        gb[(idx / inner) % n] += d;
                    }
                }
                if let Some(gx) = self.acc(*x) {
                    let inv_n = T::one() / T::from_f64(per as f64);
                    for o in 0..view.outer {
                        let base = o * per;
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for k in 0..per {
                            let d = g[base + k] * gam[k / inner];
                            mean_d += d;
                            mean_dh += d * xhat[base + k];
                        }
                        mean_d = mean_d * inv_n;
                        mean_dh = mean_dh * inv_n;
                        let r = rstd[o];
                        for k in 0..per {
                            let d = g[base + k] * gam[k / inner];
                            gx[base + k] += r * (d - mean_d - xhat[base + k] * mean_dh);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = std::mem::take(&mut self.nodes[x.0].value);
                if let Some(gx) = self.acc(*x) {
                    for ((d, &gg), &v) in gx.iter_mut().zip(g).zip(&xv) {
                        if v > T::zero() {
                            *d += gg;
                        }
                    }
                }
                self.nodes[x.0].value = xv;
            }
            Op::Gelu(x) => {
                let xv = std::mem::take(&mut self.nodes[x.0].value);
                let c = T::from_f64(GELU_C);
                let k = T::from_f64(GELU_K);
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                if let Some(gx) = self.acc(*x) {
                    for ((d, &gg), &v) in gx.iter_mut().zip(g).zip(&xv) {
                        let t = (c * (v + k * v * v * v)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * v * v);
                        *d += gg * (half * (T::one() + t) + half * v * dt);
                    }
                }
                self.nodes[x.0].value = xv;
            }
            Op::Softmax { x, n } => {
                let y = self.nodes[i].value.clone();
                if let Some(gx) = self.acc(*x) {
                    for ((yr, gr), dr) in y.chunks(*n).zip(g.chunks(*n)).zip(gx.chunks_mut(*n)) {
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                        for ((d, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += yy * (gg - dot);
                        }
                    }
                }
            }
            Op::MeanAxis { x, view } => {
                let inv = T::one() / T::from_f64(view.n as f64);
                if let Some(gx) = self.acc(*x) {
                    for o in 0..view.outer {
                        let src = &g[o * view.inner..(o + 1) * view.inner];
                        for j in 0..view.n {
                            let base = (o * view.n + j) * view.inner;
                            for (d, &s) in gx[base..base + view.inner].iter_mut().zip(src) {
                                *d += s * inv;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = self.acc(*x) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Concat {
                parts,
                outer,
                inner,
                sizes,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&p, &sz) in parts.iter().zip(sizes) {
                    if let Some(gp) = self.acc(p) {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + sz) * inner];
                            add_into(&mut gp[o * sz * inner..(o + 1) * sz * inner], src);
                        }
                    }
                    offset += sz;
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                classes,
            } => {
                let scale = g[0] / T::from_f64(labels.len() as f64);
                if let Some(gl) = self.acc(*logits) {
                    for (b, &label) in labels.iter().enumerate() {
                        for c in 0..*classes {
                            let onehot = if c == label { T::one() } else { T::zero() };
                            gl[b * classes + c] += (probs[b * classes + c] - onehot) * scale;
                        }
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gather index and output shape that permute a row-major array of `shape`.
pub fn permute_index(shape: &[usize], perm: &[usize]) -> (Vec<u32>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for a in (0..rank.saturating_sub(1)).rev() {
        in_strides[a] = in_strides[a + 1] * shape[a + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(shape);
    let mut index = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    for _ in 0..total {
        index.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum::<usize>() as u32);
        for a in (0..rank).rev() {
            counter[a] += 1;
            if counter[a] < out_shape[a] {
                break;
            }
            counter[a] = 0;
        }
    }
    (index, out_shape)
}

fn im2col<T: Scalar>(x: &[T], g: &Conv3dGeom, col: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let p = g.col_cols();
    for c in 0..g.in_ch {
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for z in 0..od {
                        let zi = (z * g.stride[0] + a) as isize - g.pad[0] as isize;
                        if zi < 0 || zi >= id as isize {
                            continue;
                        }
                        for y in 0..oh {
                            let yi = (y * g.stride[1] + b) as isize - g.pad[1] as isize;
                            if yi < 0 || yi >= ih as isize {
                                continue;
                            }
                            let src_row = ((c * id + zi as usize) * ih + yi as usize) * iw;
                            let dst_row = (z * oh + y) * ow;
                            for xo in 0..ow {
                                let xi = (xo * g.stride[2] + e) as isize - g.pad[2] as isize;
                                if xi >= 0 && xi < iw as isize {
                                    dst[dst_row + xo] = x[src_row + xi as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &Conv3dGeom, dx: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let p = g.col_cols();
    for c in 0..g.in_ch {
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    let src = &col[row * p..(row + 1) * p];
                    for z in 0..od {
                        let zi = (z * g.stride[0] + a) as isize - g.pad[0] as isize;
                        if zi < 0 || zi >= id as isize {
                            continue;
                        }
                        for y in 0..oh {
                            let yi = (y * g.stride[1] + b) as isize - g.pad[1] as isize;
                            if yi < 0 || yi >= ih as isize {
                                continue;
                            }
                            let dst_row = ((c * id + zi as usize) * ih + yi as usize) * iw;
                            let src_row = (z * oh + y) * ow;
                            for xo in 0..ow {
                                let xi = (xo * g.stride[2] + e) as isize - g.pad[2] as isize;
                                if xi >= 0 && xi < iw as isize {
                                    dx[dst_row + xi as usize] += src[src_row + xo];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
