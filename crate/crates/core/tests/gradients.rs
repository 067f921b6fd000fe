//! Finite-difference checks of every differentiable op.

use std::sync::Arc;

use mma_core::monoattn::{chunk_weights_var, expected_alignment_var};
use mma_core::numerics::gradcheck::{check, GradCheckConfig};
use mma_core::numerics::{Graph, RngStreams, Tensor, Var};
use rand::Rng;

const TOL: f64 = 1e-3;

fn rand_tensor(rng: &mut impl Rng, rows: usize, cols: usize, lo: f32, hi: f32) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn assert_grad<F>(name: &str, inputs: Vec<Tensor>, f: F)
where
    F: Fn(&mut Graph, &[Var]) -> mma_core::Result<Var>,
{
    let r = check(&inputs, GradCheckConfig::default(), f).unwrap();
    assert!(r.max_rel_err <= TOL, "{name}: rel err {} at {:?}", r.max_rel_err, r.worst);
}

fn repeat<F: FnMut(u64)>(n: u64, mut f: F) {
    for case in 0..n {
        f(case);
    }
}

#[test]
fn matmul_family() {
    repeat(20, |c| {
        let mut rng = RngStreams::new(c).stream("mm");
        let a = rand_tensor(&mut rng, 3, 4, -1.0, 1.0);
        let b = rand_tensor(&mut rng, 4, 2, -1.0, 1.0);
        let bt = rand_tensor(&mut rng, 5, 4, -1.0, 1.0);
        assert_grad("matmul", vec![a.clone(), b], |g, v| g.matmul(v[0], v[1]));
        assert_grad("matmul_bt", vec![a, bt], |g, v| g.matmul_bt(v[0], v[1]));
    });
}

#[test]
fn elementwise_family() {
    repeat(20, |c| {
        let mut rng = RngStreams::new(c).stream("ew");
        let a = rand_tensor(&mut rng, 3, 4, -2.0, 2.0);
        let b = rand_tensor(&mut rng, 3, 4, -2.0, 2.0);
        let row = rand_tensor(&mut rng, 1, 4, -1.0, 1.0);
        let s = rand_tensor(&mut rng, 1, 3, -1.0, 1.0);
        assert_grad("add", vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
        assert_grad("mul", vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
        assert_grad("add_row", vec![a.clone(), row], |g, v| g.add_row(v[0], v[1]));
        assert_grad("add_scalar_at", vec![a.clone(), s], |g, v| g.add_scalar_at(v[0], v[1], 2));
        assert_grad("scale", vec![a.clone()], |g, v| g.scale(v[0], -0.7));
        assert_grad("sigmoid", vec![a.clone()], |g, v| g.sigmoid(v[0]));
        let mask: Arc<[f32]> = (0..12).map(|i| (i % 3) as f32 * 0.5).collect::<Vec<_>>().into();
        assert_grad("mul_const", vec![a.clone()], move |g, v| g.mul_const(v[0], mask.clone()));
        // keep relu inputs away from the kink
        let away = Tensor::matrix(3, 4, a.data.iter().map(|&x| if x.abs() < 0.05 { 0.3 } else { x }).collect()).unwrap();
        assert_grad("relu", vec![away], |g, v| g.relu(v[0]));
    });
}

#[test]
fn softmax_and_layer_norm() {
    repeat(20, |c| {
        let mut rng = RngStreams::new(c).stream("sm");
        let a = rand_tensor(&mut rng, 3, 5, -2.0, 2.0);
        let vis: Vec<bool> = (0..15).map(|i| i % 5 != 4 || i == 14).collect();
        assert_grad("softmax", vec![a.clone()], |g, v| g.masked_softmax(v[0], None));
        assert_grad("masked_softmax", vec![a.clone()], move |g, v| g.masked_softmax(v[0], Some(&vis)));
        let gain = rand_tensor(&mut rng, 1, 5, 0.5, 1.5);
        let bias = rand_tensor(&mut rng, 1, 5, -0.5, 0.5);
        assert_grad("layer_norm", vec![a, gain, bias], |g, v| g.layer_norm(v[0], v[1], v[2]));
    });
}

#[test]
fn structural_ops() {
    repeat(10, |c| {
        let mut rng = RngStreams::new(c).stream("st");
        let a = rand_tensor(&mut rng, 3, 4, -1.0, 1.0);
        let b = rand_tensor(&mut rng, 3, 2, -1.0, 1.0);
        let table = rand_tensor(&mut rng, 5, 3, -1.0, 1.0);
        assert_grad("concat_cols", vec![a.clone(), b], |g, v| g.concat_cols(&[v[0], v[1]]));
        assert_grad("slice_cols", vec![a.clone()], |g, v| g.slice_cols(v[0], 1, 2));
        assert_grad("gather_rows", vec![table], |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]));
        assert_grad("sum", vec![a], |g, v| g.sum(v[0]));
    });
}

#[test]
fn smoothed_cross_entropy() {
    repeat(20, |c| {
        let mut rng = RngStreams::new(c).stream("ce");
        let logits = rand_tensor(&mut rng, 4, 6, -3.0, 3.0);
        let targets = vec![Some(1), None, Some(5), Some(0)];
        assert_grad("smoothed_ce", vec![logits], move |g, v| g.smoothed_cross_entropy(v[0], &targets, 0.1));
    });
}

#[test]
fn expected_alignment_gradient() {
    repeat(100, |c| {
        let mut rng = RngStreams::new(c).stream("ea");
        let u = rng.gen_range(1..=4);
        let t = rng.gen_range(1..=6);
        let p = rand_tensor(&mut rng, u, t, 0.05, 0.95);
        assert_grad("expected_alignment", vec![p], |g, v| expected_alignment_var(g, v[0]));
    });
}

#[test]
fn expected_alignment_through_sigmoid() {
    repeat(30, |c| {
        let mut rng = RngStreams::new(c).stream("eas");
        let e = rand_tensor(&mut rng, 3, 7, -2.0, 2.0);
        assert_grad("sigmoid+alignment", vec![e], |g, v| {
            let p = g.sigmoid(v[0])?;
            expected_alignment_var(g, p)
        });
    });
}

#[test]
fn chunk_weights_gradient() {
    repeat(100, |c| {
        let mut rng = RngStreams::new(c).stream("cw");
        let rows = rng.gen_range(1..=3);
        let t = rng.gen_range(1..=7);
        let w = rng.gen_range(1..=t + 1);
        let alpha = rand_tensor(&mut rng, rows, t, 0.0, 0.5);
        let u = rand_tensor(&mut rng, rows, t, -2.0, 2.0);
        assert_grad("chunk_weights", vec![alpha, u], move |g, v| chunk_weights_var(g, v[0], v[1], w));
    });
}
