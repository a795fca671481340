use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, Var};
use super::tensor::{numel, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

/// Named parameters, their gradients and the optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Vec<f32>>,
    pub(crate) adam: AdamState,
}

/// Graph handles of the parameters bound into one graph.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.adam
    }

    pub fn grad(&self, name: &str) -> Option<&[f32]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    pub fn set_grad(&mut self, name: &str, grad: Vec<f32>) -> Result<()> {
        let p = self.get(name)?;
        if grad.len() != p.numel() {
            return Err(Error::shape("set_grad", &p.shape, &[grad.len()]));
        }
        self.grads.insert(name.to_string(), grad);
        Ok(())
    }

    /// Overwrites every parameter whose name starts with `prefix` by the
    /// same-named tensor of `src`. Returns the number of tensors copied.
    pub fn copy_prefix(&mut self, src: &ParamStore, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, t) in self.params.iter_mut().filter(|(k, _)| k.starts_with(prefix)) {
            let s = src.get(name)?;
            if s.shape != t.shape {
                return Err(Error::shape("copy_prefix", &t.shape, &s.shape));
            }
            *t = s.clone();
            n += 1;
        }
        if n == 0 {
            return Err(Error::UnknownParameter(format!("{prefix}*")));
        }
        Ok(n)
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }

    /// Adds every parameter to `g` as a differentiable leaf.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>) -> Bindings {
        let vars = self.params.iter().map(|(k, t)| (k.clone(), g.leaf(t.cast()))).collect();
        Bindings { vars }
    }

    /// Adds every parameter to `g` as a constant (inference only).
    pub fn bind_frozen<T: Scalar>(&self, g: &mut Graph<T>) -> Bindings {
        let vars = self.params.iter().map(|(k, t)| (k.clone(), g.constant(t.cast()))).collect();
        Bindings { vars }
    }

    /// Accumulates the gradients that reached the bound parameters.
    pub fn collect_grads(&mut self, g: &Graph<f32>, bindings: &Bindings) {
        for (name, var) in bindings.iter() {
            if let Some(grad) = g.grad(var) {
                match self.grads.get_mut(name) {
                    Some(acc) => {
                        for (a, &b) in acc.iter_mut().zip(grad) {
                            *a += b;
                        }
                    }
                    None => {
                        self.grads.insert(name.to_string(), grad.to_vec());
                    }
                }
            }
        }
    }

    /// Global L2 norm of the current gradients.
    pub fn grad_norm(&self) -> f64 {
        self.grads.values().flatten().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        let missing: Vec<&str> = self.params.keys().filter(|k| !self.grads.contains_key(*k)).map(String::as_str).collect();
        if !missing.is_empty() {
            return Err(Error::MissingGradient(missing.join(", ")));
        }
        if let Some((name, _)) = self.grads.iter().find(|(_, g)| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        self.adam.step += 1;
        let t = self.adam.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in self.params.iter_mut() {
            let grad = &self.grads[name];
            let m = self.adam.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
            let v = self.adam.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
            for i in 0..p.data.len() {
                let gi = grad[i] as f64;
                let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * gi;
                let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = cfg.lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
                p.data[i] = (p.data[i] as f64 - update) as f32;
            }
        }
        Ok(())
    }

    // ---- initialization ----------------------------------------------------

    /// Linear layer `{name}.weight: [fan_in, fan_out]` (+ `{name}.bias`).
    pub fn init_linear(&mut self, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize, bias: bool) {
        self.insert(format!("{name}.weight"), trunc_normal(rng, &[fan_in, fan_out], 0.02));
        if bias {
            self.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        }
    }

    /// Layer norm `{name}.gamma` (ones) and `{name}.beta` (zeros).
    pub fn init_layer_norm(&mut self, name: &str, dim: usize) {
        self.insert(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        self.insert(format!("{name}.beta"), Tensor::zeros(&[dim]));
    }

    /// Convolution `{name}.weight: [out, in, k...]` with He initialization.
    pub fn init_conv(&mut self, rng: &mut Rng, name: &str, shape: &[usize], bias: bool) {
        let fan_in = numel(&shape[1..]);
        self.insert(format!("{name}.weight"), kaiming_normal(rng, shape, fan_in));
        if bias {
            self.insert(format!("{name}.bias"), Tensor::zeros(&[shape[0]]));
        }
    }
}

/// Normal(0, std) truncated to two standard deviations.
pub fn trunc_normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..numel(shape))
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break x as f32;
            }
        })
        .collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

pub fn kaiming_normal(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor {
        shape: shape.to_vec(),
        data: (0..numel(shape)).map(|_| normal.sample(rng) as f32).collect(),
    }
}

pub fn uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor {
        shape: shape.to_vec(),
        data: (0..numel(shape)).map(|_| rng.random_range(-bound..=bound) as f32).collect(),
    }
}
