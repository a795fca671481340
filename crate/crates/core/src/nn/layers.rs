//! Parameterized building blocks shared by the encoders.

use std::sync::Arc;

use super::graph::{Graph, Var};
use super::params::{Bindings, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const LN_EPS: f64 = 1e-5;

/// `x @ {name}.weight (+ {name}.bias)` if the bias is bound.
pub fn linear<T: Scalar>(g: &mut Graph<T>, p: &Bindings, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias")).ok();
    g.linear(x, w, b)
}

/// Layer norm over the last dimension.
pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, p: &Bindings, name: &str, x: Var) -> Result<Var> {
    let gamma = p.get(&format!("{name}.gamma"))?;
    let beta = p.get(&format!("{name}.beta"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Layer norm over the channel axis of a `[C, ...]` feature map.
pub fn channel_norm<T: Scalar>(g: &mut Graph<T>, p: &Bindings, name: &str, x: Var) -> Result<Var> {
    let gamma = p.get(&format!("{name}.gamma"))?;
    let beta = p.get(&format!("{name}.beta"))?;
    g.layer_norm_channels(x, gamma, beta, LN_EPS)
}

/// Parameters of a multi-head self-attention block named `name`.
pub fn init_attention(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize) {
    for proj in ["q", "k", "v", "proj"] {
        store.init_linear(rng, &format!("{name}.{proj}"), dim, dim, true);
    }
}

/// Multi-head self-attention applied independently inside each window.
///
/// `x` is `[windows, tokens, dim]`. `bias` (`[heads, tokens, tokens]`) is
/// added to every window's scores; `mask` (`[windows, tokens, tokens]`) is
/// added per window and shared across heads.
pub fn window_attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bindings,
    name: &str,
    x: Var,
    heads: usize,
    bias: Option<Var>,
    mask: Option<&Tensor<T>>,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || heads == 0 || shape[2] % heads != 0 {
        return Err(Error::shape("window_attention", &shape, &[heads]));
    }
    let (nw, n, c) = (shape[0], shape[1], shape[2]);
    let hd = c / heads;
    let split = |g: &mut Graph<T>, proj: &str| -> Result<Var> {
        let y = linear(g, p, &format!("{name}.{proj}"), x)?;
        let y = g.reshape(y, &[nw, n, heads, hd])?;
        g.permute(y, &[0, 2, 1, 3])
    };
    let q = split(g, "q")?;
    let k = split(g, "k")?;
    let v = split(g, "v")?;
    let scores = g.matmul_nt(q, k)?;
    let mut scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
    if let Some(b) = bias {
        scores = g.add_bias(scores, b)?;
    }
    if let Some(m) = mask {
        if m.shape != [nw, n, n] {
            return Err(Error::shape("window_attention mask", &m.shape, &[nw, n, n]));
        }
        let mut data = Vec::with_capacity(nw * heads * n * n);
        for w in 0..nw {
            for _ in 0..heads {
                data.extend_from_slice(&m.data[w * n * n..(w + 1) * n * n]);
            }
        }
        let mv = g.constant(Tensor {
            shape: vec![nw, heads, n, n],
            data,
        });
        scores = g.add(scores, mv)?;
    }
    let attn = g.softmax(scores)?;
    let out = g.matmul(attn, v)?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[nw, n, c])?;
    linear(g, p, &format!("{name}.proj"), out)
}

/// Builds a gather index from a closure mapping output position to source.
pub fn index_map(len: usize, f: impl FnMut(usize) -> usize) -> Arc<[u32]> {
    (0..len).map(f).map(|i| i as u32).collect()
}
