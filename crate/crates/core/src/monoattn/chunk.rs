//! Chunkwise attention weights over a window of `w` frames ending at each
//! candidate boundary. Windows are clipped at the first frame and each
//! window's softmax is normalised over its valid frames only, so the total
//! mass of `β` in a row equals that of `α`.

use crate::error::{shape_err, Result};
use crate::numerics::{kernels, matmul, CustomOp, Graph, Tensor, Var};

fn window(k: usize, w: usize) -> std::ops::RangeInclusive<usize> {
    (k + 1).saturating_sub(w)..=k
}

/// Softmax weights of the window ending at frame `k` (0-based), written into
/// `out[..]` aligned to the window start.
fn window_softmax(u: &[f32], k: usize, w: usize, out: &mut Vec<f64>) {
    out.clear();
    let win = window(k, w);
    let max = u[win.clone()].iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for l in win {
        let e = ((u[l] - max) as f64).exp();
        sum += e;
        out.push(e);
    }
    out.iter_mut().for_each(|v| *v /= sum);
}

fn beta_forward(alpha: &[f32], u: &[f32], rows: usize, t: usize, w: usize) -> Vec<f32> {
    let mut beta = vec![0.0f64; rows * t];
    let mut c = Vec::with_capacity(w);
    for i in 0..rows {
        let (ar, ur) = (&alpha[i * t..(i + 1) * t], &u[i * t..(i + 1) * t]);
        for k in 0..t {
            if ar[k] == 0.0 {
                continue;
            }
            window_softmax(ur, k, w, &mut c);
            let start = window(k, w).start().to_owned();
            for (off, &cw) in c.iter().enumerate() {
                beta[i * t + start + off] += ar[k] as f64 * cw;
            }
        }
    }
    beta.into_iter().map(|v| v as f32).collect()
}

/// `β[i][j] = Σ_{k=j}^{j+w-1} α[i][k] · exp(u[i][j]) / Σ_{l=k-w+1}^{k} exp(u[i][l])`
pub fn chunk_weights(alpha: &Tensor, u: &Tensor, w: usize) -> Result<Tensor> {
    check(alpha, u, w)?;
    let (rows, t) = (alpha.shape[0], alpha.shape[1]);
    Tensor::matrix(rows, t, beta_forward(&alpha.data, &u.data, rows, t, w))
}

/// Test-time weights for a hard boundary `t` (1-based): the softmax over
/// frames `max(1, t-w+1)..=t`, zero elsewhere.
pub fn chunk_weights_at(u_row: &[f32], t: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; u_row.len()];
    let mut c = Vec::with_capacity(w);
    window_softmax(u_row, t - 1, w, &mut c);
    let start = *window(t - 1, w).start();
    for (off, v) in c.into_iter().enumerate() {
        out[start + off] = v as f32;
    }
    out
}

fn check(alpha: &Tensor, u: &Tensor, w: usize) -> Result<()> {
    if w == 0 {
        return shape_err("chunk_weights", "window width must be at least 1");
    }
    if alpha.shape.len() != 2 || alpha.shape != u.shape {
        return shape_err("chunk_weights", format!("alpha {:?} vs energies {:?}", alpha.shape, u.shape));
    }
    Ok(())
}

struct ChunkWeightsOp {
    w: usize,
}

impl CustomOp for ChunkWeightsOp {
    fn name(&self) -> &'static str {
        "chunk_weights"
    }

    fn backward(&self, grad_out: &[f32], inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Vec<f32>>> {
        let (alpha, u) = (inputs[0], inputs[1]);
        let (rows, t) = (alpha.shape[0], alpha.shape[1]);
        let mut ga = vec![0.0f32; rows * t];
        let mut gu = vec![0.0f64; rows * t];
        let mut c = Vec::with_capacity(self.w);
        for i in 0..rows {
            let ar = &alpha.data[i * t..(i + 1) * t];
            let ur = &u.data[i * t..(i + 1) * t];
            let gb = &grad_out[i * t..(i + 1) * t];
            for k in 0..t {
                window_softmax(ur, k, self.w, &mut c);
                let start = *window(k, self.w).start();
                let wsum: f64 = c.iter().enumerate().map(|(o, &cw)| cw * gb[start + o] as f64).sum();
                ga[i * t + k] = wsum as f32;
                let ak = ar[k] as f64;
                if ak != 0.0 {
                    for (o, &cw) in c.iter().enumerate() {
                        gu[i * t + start + o] += ak * cw * (gb[start + o] as f64 - wsum);
                    }
                }
            }
        }
        vec![Some(ga), Some(gu.into_iter().map(|v| v as f32).collect())]
    }
}

/// Differentiable [`chunk_weights`] with respect to both `alpha` and `u`.
pub fn chunk_weights_var(g: &mut Graph, alpha: Var, u: Var, w: usize) -> Result<Var> {
    let (at, ut) = (g.value(alpha), g.value(u));
    check(at, ut, w)?;
    let (rows, t) = (at.shape[0], at.shape[1]);
    let out = Tensor::matrix(rows, t, beta_forward(&at.data, &ut.data, rows, t, w))?;
    g.custom(&[alpha, u], out, Box::new(ChunkWeightsOp { w }))
}

/// Chunk-attention projections of one decoder layer. The `H_ca` heads are
/// shared by every monotonic head of the layer.
#[derive(Clone, Debug)]
pub struct ChunkHeadParams {
    /// Per CA head, `d_model × d_c`.
    pub w_q: Vec<Tensor>,
    pub w_k: Vec<Tensor>,
    pub w_v: Vec<Tensor>,
    /// `d_model × d_model` applied to the concatenated contexts.
    pub w_o: Tensor,
    pub b_o: Vec<f32>,
}

/// Where each monotonic head attends: expected alignments `[U × T]` in
/// training, or one 1-based boundary per output step at test time (`None`
/// means the head never activated and contributes a zero context).
#[derive(Clone, Debug)]
pub enum HeadAlignment {
    Expected(Tensor),
    Hard(Vec<Option<usize>>),
}

/// Multihead chunkwise attention for one layer. Contexts are ordered
/// (MA head, CA head), concatenated to `d_model`, multiplied by `scale`
/// (the HeadDrop factor) and output-projected.
pub fn chunkwise_attention(
    heads: &[HeadAlignment],
    params: &ChunkHeadParams,
    h: &Tensor,
    s: &Tensor,
    w: usize,
    scale: f32,
) -> Result<Tensor> {
    if w == 0 {
        return shape_err("chunkwise_attention", "window width must be at least 1");
    }
    let (u, t) = (s.rows(), h.rows());
    let mut energies = Vec::with_capacity(params.w_q.len());
    let mut values = Vec::with_capacity(params.w_q.len());
    for c in 0..params.w_q.len() {
        let q = matmul(s, &params.w_q[c])?;
        let k = matmul(h, &params.w_k[c])?;
        let dc = q.cols();
        let e = kernels::gemm_nt(&q.data, &k.data, u, dc, t);
        let inv = 1.0 / (dc as f32).sqrt();
        energies.push(Tensor::matrix(u, t, e.into_iter().map(|v| v * inv).collect())?);
        values.push(matmul(h, &params.w_v[c])?);
    }
    let mut parts: Vec<Tensor> = Vec::new();
    for head in heads {
        for c in 0..energies.len() {
            let beta = match head {
                HeadAlignment::Expected(alpha) => chunk_weights(alpha, &energies[c], w)?,
                HeadAlignment::Hard(bounds) => {
                    if bounds.len() != u {
                        return shape_err("chunkwise_attention", "one boundary per output step required");
                    }
                    let mut data = vec![0.0f32; u * t];
                    for (i, b) in bounds.iter().enumerate() {
                        if let Some(tb) = *b {
                            data[i * t..(i + 1) * t].copy_from_slice(&chunk_weights_at(energies[c].row(i), tb, w));
                        }
                    }
                    Tensor::matrix(u, t, data)?
                }
            };
            parts.push(matmul(&beta, &values[c])?);
        }
    }
    let total: usize = parts.iter().map(Tensor::cols).sum();
    let mut cat = vec![0.0f32; u * total];
    let mut off = 0;
    for p in &parts {
        for i in 0..u {
            for (k, &v) in p.row(i).iter().enumerate() {
                cat[i * total + off + k] = v * scale;
            }
        }
        off += p.cols();
    }
    let mut out = matmul(&Tensor::matrix(u, total, cat)?, &params.w_o)?;
    let d = out.cols();
    for (i, v) in out.data.iter_mut().enumerate() {
        *v += params.b_o[i % d];
    }
    Ok(out)
}

/// `β`-weighted sum of value rows for a single output step at test time.
pub fn context_at(weights: &[f32], values: &Tensor, lo: usize, hi: usize) -> Vec<f32> {
    let d = values.cols();
    let mut acc = vec![0.0f64; d];
    for j in lo..hi {
        let wj = weights[j] as f64;
        if wj == 0.0 {
            continue;
        }
        for (a, &v) in acc.iter_mut().zip(values.row(j)) {
            *a += wj * v as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}
