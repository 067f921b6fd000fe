//! Independent oracles for the alignment math.

use mma_core::monoattn::{chunk_weights, chunk_weights_at, expected_alignment, hard_boundary};
use mma_core::numerics::Tensor;
use proptest::prelude::*;

/// α by enumerating every monotonic boundary sequence explicitly.
fn path_oracle(p: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (u, t) = (p.len(), p[0].len());
    let mut alpha = vec![vec![0.0; t]; u];
    // (step, previous boundary, path probability so far)
    fn walk(p: &[Vec<f64>], i: usize, prev: usize, prob: f64, alpha: &mut [Vec<f64>]) {
        if i == p.len() {
            return;
        }
        let t = p[0].len();
        let mut stay = 1.0;
        for j in prev..t {
            let here = prob * stay * p[i][j];
            alpha[i][j] += here;
            walk(p, i + 1, j, here, alpha);
            stay *= 1.0 - p[i][j];
        }
    }
    walk(p, 0, 0, 1.0, &mut alpha);
    alpha
}

fn p_matrix(u: usize, t: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.001f64..0.999, t), u)
}

fn to_tensor(p: &[Vec<f64>]) -> Tensor {
    Tensor::matrix(p.len(), p[0].len(), p.iter().flatten().map(|&v| v as f32).collect()).unwrap()
}

fn shape_and_p() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=4, 1usize..=6).prop_flat_map(|(u, t)| p_matrix(u, t))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn scan_matches_path_enumeration(p in shape_and_p()) {
        // Compare against the oracle evaluated on the f32-rounded inputs.
        let pt = to_tensor(&p);
        let rounded: Vec<Vec<f64>> = (0..p.len()).map(|i| pt.row(i).iter().map(|&v| v as f64).collect()).collect();
        let want = path_oracle(&rounded);
        let got = expected_alignment(&pt).unwrap();
        for i in 0..p.len() {
            for j in 0..p[0].len() {
                prop_assert!((got.at(i, j) as f64 - want[i][j]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn row_mass_is_bounded_and_decays(p in (1usize..=8, 1usize..=12).prop_flat_map(|(u, t)| p_matrix(u, t))) {
        let a = expected_alignment(&to_tensor(&p)).unwrap();
        let mut last = f64::INFINITY;
        for i in 0..p.len() {
            let s: f64 = a.row(i).iter().map(|&v| v as f64).sum();
            prop_assert!(a.row(i).iter().all(|&v| v >= 0.0));
            prop_assert!(s <= 1.0 + 1e-5);
            prop_assert!(s <= last + 1e-7);
            last = s;
        }
    }

    #[test]
    fn chunk_weights_conserve_mass(
        (p, u, w) in (1usize..=5, 1usize..=10).prop_flat_map(|(rows, t)| {
            (p_matrix(rows, t), prop::collection::vec(prop::collection::vec(-4.0f64..4.0, t), rows), 1usize..=t + 2)
        })
    ) {
        let a = expected_alignment(&to_tensor(&p)).unwrap();
        let b = chunk_weights(&a, &to_tensor(&u), w).unwrap();
        for i in 0..p.len() {
            let sa: f64 = a.row(i).iter().map(|&v| v as f64).sum();
            let sb: f64 = b.row(i).iter().map(|&v| v as f64).sum();
            prop_assert!((sa - sb).abs() <= 1e-6);
        }
    }

    #[test]
    fn hard_chunk_path_matches_one_hot_training_path(
        (u, t_b, w) in (1usize..=10).prop_flat_map(|t| {
            (prop::collection::vec(-4.0f64..4.0, t), 1usize..=t, 1usize..=t + 1)
        })
    ) {
        let t = u.len();
        let mut onehot = vec![0.0f32; t];
        onehot[t_b - 1] = 1.0;
        let ut = to_tensor(&[u.clone()]);
        let trained = chunk_weights(&Tensor::matrix(1, t, onehot).unwrap(), &ut, w).unwrap();
        let hard = chunk_weights_at(ut.row(0), t_b, w);
        for j in 0..t {
            prop_assert!((trained.data[j] - hard[j]).abs() <= 1e-6);
        }
    }

    #[test]
    fn hard_boundary_is_monotone_in_start(row in prop::collection::vec(0.0f32..1.0, 1..12), a in 1usize..12, b in 1usize..12) {
        let t = row.len();
        let (lo, hi) = (a.min(b).min(t), a.max(b).min(t));
        match (hard_boundary(&row, lo), hard_boundary(&row, hi)) {
            (Some(x), Some(y)) => prop_assert!(y >= x),
            (None, Some(_)) => prop_assert!(false, "later start found a boundary an earlier start missed"),
            _ => {}
        }
    }
}

#[test]
fn geometric_example_agrees_with_oracle() {
    let p = vec![vec![0.5; 3]];
    let want = path_oracle(&p);
    assert_eq!(want[0], vec![0.5, 0.25, 0.125]);
}
