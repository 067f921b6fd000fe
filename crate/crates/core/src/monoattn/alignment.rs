//! Expected alignments of a monotonic head and test-time boundary search.
//!
//! `α[i][j]` is the probability that the head stops at frame `j` for output
//! `i`, marginalised over every left-to-right stop/move path. The recursion
//! is evaluated in the division-free form
//!
//! ```text
//! q[i][0] = α[i-1][0]
//! q[i][j] = (1 - p[i][j-1]) · q[i][j-1] + α[i-1][j]
//! α[i][j] = p[i][j] · q[i][j]
//! ```
//!
//! with `α[-1]` one-hot at the first frame.

use crate::error::{shape_err, Result};
use crate::numerics::{CustomOp, Graph, Tensor, Var};

fn scan(p: &[f32], u: usize, t: usize) -> (Vec<f32>, Vec<f64>) {
    let mut alpha = vec![0.0f32; u * t];
    let mut q = vec![0.0f64; u * t];
    let mut prev = vec![0.0f64; t];
    if t > 0 {
        prev[0] = 1.0;
    }
    let mut row = vec![0.0f64; t];
    for i in 0..u {
        let pr = &p[i * t..(i + 1) * t];
        let mut qj = 0.0f64;
        for j in 0..t {
            qj = if j == 0 { prev[0] } else { (1.0 - pr[j - 1] as f64) * qj + prev[j] };
            q[i * t + j] = qj;
            row[j] = pr[j] as f64 * qj;
            alpha[i * t + j] = row[j] as f32;
        }
        std::mem::swap(&mut prev, &mut row);
    }
    (alpha, q)
}

/// Expected alignments for selection probabilities `p` of shape `[U × T]`.
pub fn expected_alignment(p: &Tensor) -> Result<Tensor> {
    if p.shape.len() != 2 {
        return shape_err("expected_alignment", format!("{:?}", p.shape));
    }
    let (u, t) = (p.shape[0], p.shape[1]);
    Tensor::matrix(u, t, scan(&p.data, u, t).0)
}

struct ExpectedAlignmentOp {
    q: Vec<f64>,
}

impl CustomOp for ExpectedAlignmentOp {
    fn name(&self) -> &'static str {
        "expected_alignment"
    }

    fn backward(&self, grad_out: &[f32], inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Vec<f32>>> {
        let p = inputs[0];
        let (u, t) = (p.shape[0], p.shape[1]);
        let mut gp = vec![0.0f32; u * t];
        // Gradient flowing into α[i] from row i + 1 through the `+ α[i-1][j]` term.
        let mut carry = vec![0.0f64; t];
        let mut next_carry = vec![0.0f64; t];
        for i in (0..u).rev() {
            let pr = &p.data[i * t..(i + 1) * t];
            let mut gq_next = 0.0f64;
            for j in (0..t).rev() {
                let ga = grad_out[i * t + j] as f64 + carry[j];
                let pj = pr[j] as f64;
                let qj = self.q[i * t + j];
                let gq = ga * pj + gq_next * (1.0 - pj);
                gp[i * t + j] = (ga * qj - gq_next * qj) as f32;
                next_carry[j] = gq;
                gq_next = gq;
            }
            std::mem::swap(&mut carry, &mut next_carry);
        }
        vec![Some(gp)]
    }
}

/// Differentiable [`expected_alignment`].
pub fn expected_alignment_var(g: &mut Graph, p: Var) -> Result<Var> {
    let pt = g.value(p);
    if pt.shape.len() != 2 {
        return shape_err("expected_alignment", format!("{:?}", pt.shape));
    }
    let (u, t) = (pt.shape[0], pt.shape[1]);
    let (alpha, q) = scan(&pt.data, u, t);
    let out = Tensor::matrix(u, t, alpha)?;
    g.custom(&[p], out, Box::new(ExpectedAlignmentOp { q }))
}

/// Threshold for activating a boundary at test time.
pub const ACTIVATION_THRESHOLD: f32 = 0.5;

/// First frame `j ≥ t_prev` (1-based) with `p[j] ≥ 0.5`, or `None` if the
/// head never activates within the row.
pub fn hard_boundary(p_row: &[f32], t_prev: usize) -> Option<usize> {
    debug_assert!(t_prev >= 1);
    first_activation(t_prev, p_row.len(), |j| p_row[j - 1])
}

/// [`hard_boundary`] over lazily computed probabilities for frames
/// `from..=to` (1-based, inclusive).
pub fn first_activation(from: usize, to: usize, mut prob: impl FnMut(usize) -> f32) -> Option<usize> {
    (from.max(1)..=to).find(|&j| prob(j) >= ACTIVATION_THRESHOLD)
}
