use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Result};
use crate::numerics::{kernels, matmul, Graph, Tensor, Var};

use super::Mode;

/// Offset the monotonic energy starts from, so early stop probabilities are
/// small and heads initially scan forward.
pub const R_INIT: f32 = -2.0;

/// Projections of one monotonic attention head.
#[derive(Clone, Debug)]
pub struct MonotonicHeadParams {
    /// `d_model × d_k`, applied to decoder states.
    pub w_s: Tensor,
    /// `d_model × d_k`, applied to encoder outputs.
    pub w_h: Tensor,
    pub r: f32,
}

impl MonotonicHeadParams {
    pub fn d_k(&self) -> usize {
        self.w_s.cols()
    }
}

/// `e[i][j] = (s_i W_s)·(h_j W_h) / √d_k + r`, shape `[U × T]`.
pub fn monotonic_energy(h: &Tensor, s: &Tensor, params: &MonotonicHeadParams) -> Result<Tensor> {
    if params.w_s.shape != params.w_h.shape {
        return shape_err("monotonic_energy", "W_s and W_h differ in shape");
    }
    let q = matmul(s, &params.w_s)?;
    let k = matmul(h, &params.w_h)?;
    let (u, t, dk) = (q.rows(), k.rows(), params.d_k());
    let scale = 1.0 / (dk as f32).sqrt();
    let e = kernels::gemm_nt(&q.data, &k.data, u, dk, t);
    Tensor::matrix(u, t, e.into_iter().map(|v| v * scale + params.r).collect())
}

/// Energy of a single (query, key) pair of projected vectors.
pub fn energy_at(q: &[f32], k: &[f32], r: f32) -> f32 {
    (kernels::dot(q, k) / (q.len() as f64).sqrt()) as f32 + r
}

/// Tape version over already-projected queries `[U × d_k]` and keys
/// `[T × d_k]`; `offsets[idx]` is the head's learnable `r`.
pub fn energy_var(g: &mut Graph, q: Var, k: Var, offsets: Option<(Var, usize)>) -> Result<Var> {
    let dk = g.value(q).cols();
    let qk = g.matmul_bt(q, k)?;
    let scaled = g.scale(qk, 1.0 / (dk as f32).sqrt())?;
    match offsets {
        Some((r, idx)) => g.add_scalar_at(scaled, r, idx),
        None => Ok(scaled),
    }
}

/// `sigmoid(e + noise)`; noise is Gaussian with `noise_std` in training and
/// absent at test time.
pub fn selection_probs<R: Rng>(energies: &Tensor, mode: Mode, noise_std: f32, rng: &mut R) -> Tensor {
    let data = energies
        .data
        .iter()
        .map(|&e| {
            let n = match mode {
                Mode::Train if noise_std > 0.0 => noise_std * rng.sample::<f32, _>(StandardNormal),
                _ => 0.0,
            };
            kernels::sigmoid(e + n)
        })
        .collect();
    Tensor { data, ..energies.clone() }
}

/// Noise tensor for [`selection_probs_var`]; zeros at test time.
pub fn selection_noise<R: Rng>(shape: &[usize], mode: Mode, noise_std: f32, rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if mode == Mode::Train && noise_std > 0.0 {
        for v in &mut t.data {
            *v = noise_std * rng.sample::<f32, _>(StandardNormal);
        }
    }
    t
}

pub fn selection_probs_var(g: &mut Graph, energies: Var, noise: Option<Tensor>) -> Result<Var> {
    let pre = match noise {
        Some(n) => {
            let nv = g.constant(n);
            g.add(energies, nv)?
        }
        None => energies,
    };
    g.sigmoid(pre)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStreams;
    use rand::Rng;

    #[test]
    fn zero_projections_expose_offset() {
        let p = MonotonicHeadParams { w_s: Tensor::zeros(&[4, 2]), w_h: Tensor::zeros(&[4, 2]), r: R_INIT };
        let h = Tensor::matrix(3, 4, vec![1.0; 12]).unwrap();
        let s = Tensor::matrix(2, 4, vec![0.5; 8]).unwrap();
        let e = monotonic_energy(&h, &s, &p).unwrap();
        assert_eq!(e.shape, vec![2, 3]);
        assert!(e.data.iter().all(|&v| v == -2.0));
    }

    #[test]
    fn scalar_case() {
        let p = MonotonicHeadParams {
            w_s: Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            w_h: Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            r: R_INIT,
        };
        let e = monotonic_energy(&Tensor::matrix(1, 1, vec![3.0]).unwrap(), &Tensor::matrix(1, 1, vec![2.0]).unwrap(), &p).unwrap();
        assert_eq!(e.data, vec![6.0 + R_INIT]);
    }

    #[test]
    fn matches_naive_loop() {
        let mut rng = RngStreams::new(5).stream("t");
        let mut rand_t = |r: usize, c: usize| {
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let (h, s) = (rand_t(6, 8), rand_t(3, 8));
        let p = MonotonicHeadParams { w_s: rand_t(8, 4), w_h: rand_t(8, 4), r: 0.3 };
        let e = monotonic_energy(&h, &s, &p).unwrap();
        for i in 0..3 {
            for j in 0..6 {
                let mut acc = 0.0f64;
                for d in 0..4 {
                    let mut q = 0.0f64;
                    let mut k = 0.0f64;
                    for m in 0..8 {
                        q += s.at(i, m) as f64 * p.w_s.at(m, d) as f64;
                        k += h.at(j, m) as f64 * p.w_h.at(m, d) as f64;
                    }
                    acc += q * k;
                }
                let want = acc / 2.0 + 0.3;
                assert!((e.at(i, j) as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn selection_probability_examples() {
        let mut rng = RngStreams::new(1).stream("noise");
        let e = Tensor::matrix(1, 2, vec![0.0, -2.0]).unwrap();
        let p = selection_probs(&e, Mode::Test, 1.0, &mut rng);
        assert_eq!(p.data[0], 0.5);
        assert!((p.data[1] - 0.119_202_92).abs() < 1e-7);
        let p_train = selection_probs(&e, Mode::Train, 0.0, &mut rng);
        assert_eq!(p_train.data, p.data);
        let noisy = selection_probs(&e, Mode::Train, 1.0, &mut rng);
        assert_ne!(noisy.data, p.data);
    }
}
