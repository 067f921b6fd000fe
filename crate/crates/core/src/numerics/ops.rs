//! Forward-only tensor functions. The graph ops in [`super::graph`] call
//! these for their forward pass.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

pub const LAYER_NORM_EPS: f32 = 1e-6;

/// Boolean visibility mask; `true` marks a position that may receive weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub shape: Vec<usize>,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, data: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return shape_err("mask", format!("shape {shape:?} vs {} values", data.len()));
        }
        Ok(Self { shape, data })
    }

    /// Expand to the full shape of `target` under right-aligned broadcasting.
    pub fn broadcast_to(&self, target: &[usize]) -> Result<Vec<bool>> {
        if self.shape.len() > target.len() {
            return shape_err("mask", format!("{:?} has more axes than {target:?}", self.shape));
        }
        let offset = target.len() - self.shape.len();
        for (i, &d) in self.shape.iter().enumerate() {
            if d != 1 && d != target[offset + i] {
                return shape_err(
                    "mask",
                    format!("{:?} not broadcastable to {target:?}", self.shape),
                );
            }
        }
        let total: usize = target.iter().product();
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; target.len()];
        for _ in 0..total {
            let mut flat = 0;
            for (i, &d) in self.shape.iter().enumerate() {
                let coord = if d == 1 { 0 } else { idx[offset + i] };
                flat = flat * d + coord;
            }
            out.push(self.data[flat]);
            for ax in (0..target.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < target[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(out)
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return shape_err("matmul", format!("{:?} x {:?}", a.shape, b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    Tensor::matrix(m, n, kernels::gemm_nn(&a.data, &b.data, m, k, n))
}

/// Softmax along `axis`; masked positions receive exactly zero and a slice
/// with every position masked comes back all zeros.
pub fn masked_softmax(x: &Tensor, mask: Option<&Mask>, axis: usize) -> Result<Tensor> {
    if axis >= x.shape.len().max(1) {
        return shape_err("masked_softmax", format!("axis {axis} for shape {:?}", x.shape));
    }
    let full = mask.map(|m| m.broadcast_to(&x.shape)).transpose()?;
    let len = x.shape.get(axis).copied().unwrap_or(1);
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = vec![0.0f32; x.len()];
    let mut buf = vec![0.0f32; len];
    let mut vis = vec![true; len];
    let mut res = vec![0.0f32; len];
    for o in 0..outer {
        for i in 0..inner {
            for l in 0..len {
                let flat = (o * len + l) * inner + i;
                buf[l] = x.data[flat];
                vis[l] = full.as_ref().map_or(true, |m| m[flat]);
            }
            kernels::softmax_row(&buf, Some(&vis), &mut res);
            for l in 0..len {
                out[(o * len + l) * inner + i] = res[l];
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Per-row standardisation over the last axis followed by `gain`/`bias`.
pub fn layer_norm(x: &Tensor, gain: &[f32], bias: &[f32], eps: f32) -> Result<Tensor> {
    let c = x.cols();
    if gain.len() != c || bias.len() != c {
        return shape_err("layer_norm", format!("{} columns, gain {}, bias {}", c, gain.len(), bias.len()));
    }
    let mut out = vec![0.0f32; x.len()];
    for r in 0..x.rows() {
        let row = x.row(r);
        let (mean, rstd) = row_stats(row, eps);
        for j in 0..c {
            let xhat = (row[j] as f64 - mean) * rstd;
            out[r * c + j] = (xhat * gain[j] as f64 + bias[j] as f64) as f32;
        }
    }
    Tensor::new(x.shape.clone(), out)
}

pub(crate) fn row_stats(row: &[f32], eps: f32) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_identity_and_small_cases() {
        let eye = Tensor::from_rows(&[vec![1., 0.], vec![0., 1.]]).unwrap();
        let b = Tensor::from_rows(&[vec![3., 4.], vec![5., 6.]]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap().data, vec![3., 4., 5., 6.]);
        let r = Tensor::from_rows(&[vec![1., 2.]]).unwrap();
        let c = Tensor::from_rows(&[vec![3.], vec![4.]]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data, vec![11.]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f32> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = matmul(&Tensor::matrix(4, 5, a.clone()).unwrap(), &Tensor::matrix(5, 3, b.clone()).unwrap()).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0f32;
                for k in 0..5 {
                    s += a[i * 5 + k] * b[k * 3 + j];
                }
                assert!((got.at(i, j) - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::new(vec![3], vec![0., 0., 0.]).unwrap();
        let y = masked_softmax(&x, None, 0).unwrap();
        for v in y.data {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }

        let x = Tensor::new(vec![3], vec![1., 2., 3.]).unwrap();
        let m = Mask::new(vec![3], vec![true, true, false]).unwrap();
        let y = masked_softmax(&x, Some(&m), 0).unwrap();
        assert!((y.data[0] - 0.268_941_4).abs() < 1e-6);
        assert!((y.data[1] - 0.731_058_6).abs() < 1e-6);
        assert_eq!(y.data[2], 0.0);

        let x = Tensor::new(vec![2], vec![1000., 1001.]).unwrap();
        let y = masked_softmax(&x, None, 0).unwrap();
        assert!((y.data[0] - 0.268_941_4).abs() < 1e-6);
        assert!((y.data[1] - 0.731_058_6).abs() < 1e-6);
    }

    #[test]
    fn softmax_fully_masked_slice_is_zero() {
        let x = Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap();
        let m = Mask::new(vec![2, 2], vec![false, false, true, true]).unwrap();
        let y = masked_softmax(&x, Some(&m), 1).unwrap();
        assert_eq!(&y.data[..2], &[0.0, 0.0]);
        assert!((y.data[2] + y.data[3] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_along_leading_axis_with_broadcast_mask() {
        let x = Tensor::matrix(3, 2, vec![0., 5., 0., 5., 0., 5.]).unwrap();
        // mask rows 0..2 of every column
        let m = Mask::new(vec![3, 1], vec![true, true, false]).unwrap();
        let y = masked_softmax(&x, Some(&m), 0).unwrap();
        assert!((y.at(0, 0) - 0.5).abs() < 1e-7);
        assert!((y.at(1, 1) - 0.5).abs() < 1e-7);
        assert_eq!(y.at(2, 0), 0.0);
    }

    #[test]
    fn layer_norm_examples() {
        let x = Tensor::new(vec![3], vec![1., 1., 1.]).unwrap();
        assert_eq!(layer_norm(&x, &[1.; 3], &[0.; 3], LAYER_NORM_EPS).unwrap().data, vec![0.; 3]);
        let x = Tensor::new(vec![2], vec![1., 3.]).unwrap();
        let y = layer_norm(&x, &[1.; 2], &[0.; 2], LAYER_NORM_EPS).unwrap();
        assert!((y.data[0] + 1.0).abs() < 1e-5 && (y.data[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_random_row_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f32> = (0..64).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let y = layer_norm(&Tensor::new(vec![64], data).unwrap(), &[1.; 64], &[0.; 64], LAYER_NORM_EPS).unwrap();
        let mean = y.data.iter().map(|&v| v as f64).sum::<f64>() / 64.0;
        let var = y.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() <= 1e-5);
        assert!((var - 1.0).abs() <= 1e-3);
    }
}
