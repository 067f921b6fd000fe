//! Central finite-difference checks of tape gradients.
//!
//! The checked function maps input leaves to an output of any shape; the
//! check contracts that output against fixed random weights so every output
//! element contributes. Finite differences use the exact perturbation that
//! survived `f32` rounding and accumulate the contraction in `f64`.
//!
//! Errors are normwise per input tensor: `max|a − n| / max(max|a|, max|n|)`,
//! and also over all inputs concatenated into one gradient vector.
//! Element-wise ratios are meaningless for components many orders of
//! magnitude below the tensor's gradient scale, where `f32` forward rounding
//! dominates the difference quotient.

use std::sync::Arc;

use rand::Rng;

use super::graph::{Graph, Var};
use super::rng::RngStreams;
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f32,
    /// Lower bound on the normwise denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-3, floor: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
    /// Normwise error of each input tensor.
    pub per_input: Vec<f64>,
    /// Normwise error over all inputs taken as one gradient vector.
    pub global_rel_err: f64,
}

pub fn check<F>(inputs: &[Tensor], cfg: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let probe = forward(inputs, &f)?;
    let mut rng = RngStreams::new(cfg.seed).stream("gradcheck");
    let weights: Arc<[f32]> = (0..probe.len()).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f32>>().into();

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
    let out = f(&mut g, &vars)?;
    let weighted = g.mul_const(out, weights.clone())?;
    let loss = g.sum(weighted)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f32]>::to_vec).unwrap_or_default())
        .collect();

    let contract = |ts: &[Tensor]| -> Result<f64> {
        let y = forward(ts, &f)?;
        Ok(y.data.iter().zip(weights.iter()).map(|(&a, &b)| a as f64 * b as f64).sum())
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, checked: 0, per_input: Vec::new(), global_rel_err: 0.0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let (mut global_diff, mut global_scale) = (0.0f64, cfg.floor);
    for (ti, t) in inputs.iter().enumerate() {
        let mut numeric = Vec::with_capacity(t.len());
        for e in 0..t.len() {
            let x0 = t.data[e];
            let (plus, minus) = (x0 + cfg.step, x0 - cfg.step);
            work[ti].data[e] = plus;
            let lp = contract(&work)?;
            work[ti].data[e] = minus;
            let lm = contract(&work)?;
            work[ti].data[e] = x0;
            numeric.push((lp - lm) / (plus as f64 - minus as f64));
        }
        let analytic_t: Vec<f64> = (0..t.len()).map(|e| analytic[ti].get(e).copied().unwrap_or(0.0) as f64).collect();
        let scale = numeric
            .iter()
            .chain(&analytic_t)
            .fold(cfg.floor, |m, v| m.max(v.abs()));
        let mut tensor_err = 0.0f64;
        global_scale = global_scale.max(scale);
        for e in 0..t.len() {
            global_diff = global_diff.max((analytic_t[e] - numeric[e]).abs());
            let rel = (analytic_t[e] - numeric[e]).abs() / scale;
            report.checked += 1;
            tensor_err = tensor_err.max(rel);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((ti, e, analytic_t[e], numeric[e]));
            }
        }
        report.per_input.push(tensor_err);
    }
    report.global_rel_err = global_diff / global_scale;
    Ok(report)
}

fn forward<F>(inputs: &[Tensor], f: &F) -> Result<Tensor>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).clone())
}
