//! Raw dense kernels over row-major slices. Reductions accumulate in `f64`.

/// `a[m×k] · b[k×n]`
pub fn gemm_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let brow = &b[kk * n..(kk + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += av * bv as f64;
            }
        }
        for (o, s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]) as f32;
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn(a: &[f32], b: &[f32], k: usize, m: usize, n: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; m * n];
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            for (s, &bv) in acc[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *s += av * bv as f64;
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    // Four partial sums so the loop vectorizes.
    let mut s = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        s[0] += a[i] as f64 * b[i] as f64;
        s[1] += a[i + 1] as f64 * b[i + 1] as f64;
        s[2] += a[i + 2] as f64 * b[i + 2] as f64;
        s[3] += a[i + 3] as f64 * b[i + 3] as f64;
    }
    let mut total = (s[0] + s[1]) + (s[2] + s[3]);
    for i in chunks * 4..a.len() {
        total += a[i] as f64 * b[i] as f64;
    }
    total
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row, restricted to `allowed` positions.
/// A row with nothing allowed becomes all zeros.
pub fn softmax_row(x: &[f32], allowed: Option<&[bool]>, out: &mut [f32]) {
    let ok = |j: usize| allowed.map_or(true, |m| m[j]);
    let mut max = f32::NEG_INFINITY;
    for (j, &v) in x.iter().enumerate() {
        if ok(j) && v > max {
            max = v;
        }
    }
    if max == f32::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut sum = 0.0f64;
    for (j, (&v, o)) in x.iter().zip(out.iter_mut()).enumerate() {
        if ok(j) {
            let e = ((v - max) as f64).exp();
            sum += e;
            *o = e as f32;
        } else {
            *o = 0.0;
        }
    }
    for (j, o) in out.iter_mut().enumerate() {
        if ok(j) {
            *o = (*o as f64 / sum) as f32;
        }
    }
}

pub fn log_softmax_row(x: &[f32]) -> Vec<f32> {
    let max = x.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let lse = x.iter().map(|&v| ((v - max) as f64).exp()).sum::<f64>().ln() + max as f64;
    x.iter().map(|&v| (v as f64 - lse) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for t in 0..k {
                    s += a[i * k + t] as f64 * b[t * n + j] as f64;
                }
                c[i * n + j] = s as f32;
            }
        }
        c
    }

    fn transpose(a: &[f32], r: usize, c: usize) -> Vec<f32> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_agree() {
        let (m, k, n) = (3, 7, 5);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let nn = gemm_nn(&a, &b, m, k, n);
        let nt = gemm_nt(&a, &transpose(&b, k, n), m, k, n);
        let tn = gemm_tn(&transpose(&a, m, k), &b, k, m, n);
        for i in 0..m * n {
            assert!((nn[i] - want[i]).abs() < 1e-6);
            assert!((nt[i] - want[i]).abs() < 1e-6);
            assert!((tn[i] - want[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-100.0) >= 0.0 && sigmoid(-100.0) < 1e-40);
        assert_eq!(sigmoid(100.0), 1.0);
    }
}
