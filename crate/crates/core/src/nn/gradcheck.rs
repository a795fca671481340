//! Finite-difference verification of analytic gradients.

use rand::seq::index::sample;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng::rng;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    pub tol: f64,
    /// Denominator floor for the relative error, so coordinates with
    /// vanishing gradients are compared absolutely.
    pub floor: f64,
    /// Coordinates checked per input (all if the input is smaller).
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-3,
            tol: 1e-4,
            floor: 1e-3,
            max_coords: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, coordinate)` of the worst disagreement.
    pub worst: (usize, usize),
    pub checked: usize,
    pub passed: bool,
}

/// Compares the analytic gradient of the scalar `f(inputs)` with central
/// finite differences, evaluated in `f64`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out)[0])
    };

    let mut rng = rng(opts.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
        passed: true,
    };
    let mut work = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        let coords: Vec<usize> = if t.numel() <= opts.max_coords {
            (0..t.numel()).collect()
        } else {
            sample(&mut rng, t.numel(), opts.max_coords).into_vec()
        };
        for c in coords {
            let x0 = t.data[c];
            work[i].data[c] = x0 + opts.h;
            let fp = eval(&work)?;
            work[i].data[c] = x0 - opts.h;
            let fm = eval(&work)?;
            work[i].data[c] = x0;
            let numeric = (fp - fm) / (2.0 * opts.h);
            let a = analytic[i][c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = rel;
                report.worst = (i, c);
            }
            report.checked += 1;
        }
    }
    report.passed = report.max_rel_err < opts.tol;
    Ok(report)
}
