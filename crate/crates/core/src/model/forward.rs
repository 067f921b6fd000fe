//! Encoder and teacher-forced decoder on the tape.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{ChunkMask, ModelConfig};
use super::params::{Attention, FeedForward, Linear, Mma, ModelParams, Norm};
use crate::error::{shape_err, Error, Result};
use crate::monoattn::{self, chunk_weights_var, energy, expected_alignment_var, HeadDropConfig, HeadDropMask, Mode};
use crate::numerics::{Bound, Graph, Tensor, Var};

/// Random sources for one training forward pass. Absent in test mode.
pub struct Noise<'a> {
    pub dropout: &'a mut ChaCha8Rng,
    pub selection: &'a mut ChaCha8Rng,
    pub headdrop: &'a mut ChaCha8Rng,
}

/// Alignment state of one MMA layer for one utterance.
#[derive(Clone, Debug)]
pub struct LayerAlignment {
    pub layer: usize,
    /// Normalised decoder states the layer queried with, `[U × d_model]`.
    pub s: Tensor,
    /// Per head, `[U × T]` selection probabilities.
    pub p: Vec<Tensor>,
    /// Per head, `[U × T]` expected alignments (zero for dropped heads).
    pub alpha: Vec<Tensor>,
    pub headdrop: HeadDropMask,
}

pub struct Forward<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ModelParams,
    pub bound: &'a Bound,
    pub mode: Mode,
    pub noise: Option<Noise<'a>>,
}

/// Sinusoidal position encodings for positions `0..len`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0f32; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin() as f32;
            data[pos * d + 2 * i + 1] = angle.cos() as f32;
        }
        if d % 2 == 1 {
            let angle = pos as f64 / 10000f64.powf((d - 1) as f64 / d as f64);
            data[pos * d + d - 1] = angle.sin() as f32;
        }
    }
    Tensor { shape: vec![len, d], data, grad: None, requires_grad: false }
}

/// Concatenate each run of `factor` frames (zero-padding the last run).
pub fn stack_frames(frames: &Tensor, factor: usize) -> Result<Tensor> {
    let (raw, d_in) = (frames.rows(), frames.cols());
    if raw == 0 {
        return shape_err("encode", "empty input");
    }
    let t = raw.div_ceil(factor);
    let mut data = vec![0.0f32; t * factor * d_in];
    data[..raw * d_in].copy_from_slice(&frames.data);
    Tensor::matrix(t, factor * d_in, data)
}

/// Which key frames each query frame of the encoder may attend to.
pub fn encoder_visibility(t: usize, mask: Option<ChunkMask>) -> Option<Vec<bool>> {
    let m = mask?;
    let mut vis = vec![false; t * t];
    for q in 0..t {
        let start = (q / m.current) * m.current;
        let end = start + m.current - 1;
        let lo = start.saturating_sub(m.left);
        let hi = (end + m.right).min(t - 1);
        for k in lo..=hi {
            vis[q * t + k] = true;
        }
    }
    Some(vis)
}

pub fn causal_visibility(u: usize) -> Vec<bool> {
    (0..u * u).map(|i| i % u <= i / u).collect()
}

impl<'a> Forward<'a> {
    fn p(&self, id: crate::numerics::ParamId) -> Var {
        self.bound[id]
    }

    fn linear(&self, g: &mut Graph, x: Var, l: &Linear) -> Result<Var> {
        let y = g.matmul(x, self.p(l.w))?;
        match l.b {
            Some(b) => g.add_row(y, self.p(b)),
            None => Ok(y),
        }
    }

    fn norm(&self, g: &mut Graph, x: Var, n: &Norm) -> Result<Var> {
        g.layer_norm(x, self.p(n.gain), self.p(n.bias))
    }

    fn dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let rate = self.cfg.dropout;
        let Some(noise) = self.noise.as_mut() else { return Ok(x) };
        if self.mode == Mode::Test || rate <= 0.0 {
            return Ok(x);
        }
        let n = g.value(x).len();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = (0..n).map(|_| if noise.dropout.gen::<f32>() < rate { 0.0 } else { keep }).collect();
        g.mul_const(x, Arc::from(mask))
    }

    fn attention(&mut self, g: &mut Graph, query: Var, memory: Var, a: &Attention, vis: Option<&[bool]>) -> Result<Var> {
        let d = self.cfg.d_model;
        let h = self.cfg.heads;
        let dk = d / h;
        let q = self.linear(g, query, &a.q)?;
        let k = self.linear(g, memory, &a.k)?;
        let v = self.linear(g, memory, &a.v)?;
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let qh = g.slice_cols(q, i * dk, dk)?;
            let kh = g.slice_cols(k, i * dk, dk)?;
            let vh = g.slice_cols(v, i * dk, dk)?;
            let s = g.matmul_bt(qh, kh)?;
            let s = g.scale(s, 1.0 / (dk as f32).sqrt())?;
            let pr = g.masked_softmax(s, vis)?;
            let pr = self.dropout(g, pr)?;
            heads.push(g.matmul(pr, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        self.linear(g, cat, &a.o)
    }

    fn feed_forward(&mut self, g: &mut Graph, x: Var, f: &FeedForward) -> Result<Var> {
        let hid = self.linear(g, x, &f.inner)?;
        let hid = g.relu(hid)?;
        self.linear(g, hid, &f.outer)
    }

    /// Residual `x + dropout(sub(norm(x)))`.
    fn residual(&mut self, g: &mut Graph, x: Var, sub: Var) -> Result<Var> {
        let sub = self.dropout(g, sub)?;
        g.add(x, sub)
    }

    /// `frames [T_raw × d_in]` → `h [⌈T_raw/factor⌉ × d_model]`.
    pub fn encode(&mut self, g: &mut Graph, frames: &Tensor) -> Result<Var> {
        if frames.cols() != self.cfg.d_in {
            return shape_err("encode", format!("expected {} features, got {}", self.cfg.d_in, frames.cols()));
        }
        let stacked = stack_frames(frames, self.cfg.frame_stack_factor)?;
        let t = stacked.rows();
        let x = g.constant(stacked);
        let x = self.linear(g, x, &self.params.frontend)?;
        let pe = g.constant(positional_encoding(t, self.cfg.d_model));
        let mut x = g.add(x, pe)?;
        let vis = encoder_visibility(t, self.cfg.chunk_mask);
        for layer in &self.params.encoder {
            let y = self.norm(g, x, &layer.norm_attn)?;
            let a = self.attention(g, y, y, &layer.attn, vis.as_deref())?;
            x = self.residual(g, x, a)?;
            let y = self.norm(g, x, &layer.norm_ff)?;
            let f = self.feed_forward(g, y, &layer.ff)?;
            x = self.residual(g, x, f)?;
        }
        self.norm(g, x, &self.params.enc_norm)
    }

    /// Teacher-forced decoder over `inputs = [sos, y_1, …, y_{U-1}]`.
    /// Returns logits `[U × vocab]` and the alignments of every MMA layer.
    pub fn decode_train(&mut self, g: &mut Graph, h: Var, inputs: &[usize]) -> Result<(Var, Vec<LayerAlignment>)> {
        let u = inputs.len();
        if u == 0 {
            return shape_err("decode_train", "empty target sequence");
        }
        let d = self.cfg.d_model;
        let emb = g.gather_rows(self.p(self.params.embed), inputs)?;
        let emb = g.scale(emb, (d as f32).sqrt())?;
        let pe = g.constant(positional_encoding(u, d));
        let mut x = g.add(emb, pe)?;
        let causal = causal_visibility(u);
        let mut aligns = Vec::new();
        for (l, layer) in self.params.decoder.iter().enumerate() {
            let y = self.norm(g, x, &layer.norm_self)?;
            let a = self.attention(g, y, y, &layer.self_attn, Some(&causal))?;
            x = self.residual(g, x, a)?;
            if let Some(mma) = &layer.mma {
                let y = self.norm(g, x, &mma.norm)?;
                let (ctx, al) = self.mma(g, y, h, mma, l)?;
                aligns.push(al);
                x = self.residual(g, x, ctx)?;
            }
            let y = self.norm(g, x, &layer.norm_ff)?;
            let f = self.feed_forward(g, y, &layer.ff)?;
            x = self.residual(g, x, f)?;
        }
        let x = self.norm(g, x, &self.params.dec_norm)?;
        let logits = self.linear(g, x, &self.params.output)?;
        Ok((logits, aligns))
    }

    fn mma(&mut self, g: &mut Graph, s: Var, h: Var, m: &Mma, layer: usize) -> Result<(Var, LayerAlignment)> {
        let cfg = self.cfg;
        let (dk, dc) = (cfg.d_k(), cfg.d_c());
        let (u, t) = (g.value(s).rows(), g.value(h).rows());
        let mode = self.mode;
        let drop = match self.noise.as_mut() {
            Some(n) => monoattn::headdrop::draw(cfg.ma_heads, HeadDropConfig { p_hd: cfg.p_hd }, mode, n.headdrop),
            None => HeadDropMask::identity(cfg.ma_heads),
        };

        let q = g.matmul(s, self.p(m.w_s))?;
        let k = g.matmul(h, self.p(m.w_h))?;
        let cq = g.matmul(s, self.p(m.chunk_q))?;
        let ck = g.matmul(h, self.p(m.chunk_k))?;
        let cv = g.matmul(h, self.p(m.chunk_v))?;
        let mut chunk_energy = Vec::with_capacity(cfg.ca_heads);
        let mut chunk_values = Vec::with_capacity(cfg.ca_heads);
        for c in 0..cfg.ca_heads {
            let qc = g.slice_cols(cq, c * dc, dc)?;
            let kc = g.slice_cols(ck, c * dc, dc)?;
            chunk_energy.push(energy::energy_var(g, qc, kc, None)?);
            chunk_values.push(g.slice_cols(cv, c * dc, dc)?);
        }

        let mut p_vals = Vec::with_capacity(cfg.ma_heads);
        let mut alpha_vals = Vec::with_capacity(cfg.ma_heads);
        let mut parts = Vec::with_capacity(cfg.ma_heads * cfg.ca_heads);
        for head in 0..cfg.ma_heads {
            let qm = g.slice_cols(q, head * dk, dk)?;
            let km = g.slice_cols(k, head * dk, dk)?;
            let e = energy::energy_var(g, qm, km, Some((self.p(m.r), head)))?;
            let noise = match (self.noise.as_mut(), mode) {
                (Some(n), Mode::Train) => Some(energy::selection_noise(&[u, t], mode, cfg.noise_std, n.selection)),
                _ => None,
            };
            let p = energy::selection_probs_var(g, e, noise)?;
            p_vals.push(g.value(p).clone());
            if !drop.keep[head] {
                alpha_vals.push(Tensor::zeros(&[u, t]));
                for _ in 0..cfg.ca_heads {
                    parts.push(g.constant(Tensor::zeros(&[u, dc])));
                }
                continue;
            }
            let alpha = expected_alignment_var(g, p)?;
            alpha_vals.push(g.value(alpha).clone());
            for c in 0..cfg.ca_heads {
                let beta = chunk_weights_var(g, alpha, chunk_energy[c], cfg.chunk_width)?;
                parts.push(g.matmul(beta, chunk_values[c])?);
            }
        }
        let mut ctx = g.concat_cols(&parts)?;
        if drop.scale != 1.0 {
            ctx = g.scale(ctx, drop.scale)?;
        }
        let out = self.linear(g, ctx, &m.out)?;
        Ok((out, LayerAlignment { layer, s: g.value(s).clone(), p: p_vals, alpha: alpha_vals, headdrop: drop }))
    }
}

/// Summed smoothed cross-entropy and the number of scored positions.
pub fn sequence_loss(g: &mut Graph, logits: Var, targets: &[usize], eps: f32, pad: usize) -> Result<(Var, usize)> {
    let t: Vec<Option<usize>> = targets.iter().map(|&y| (y != pad).then_some(y)).collect();
    let n = t.iter().flatten().count();
    Ok((g.smoothed_cross_entropy(logits, &t, eps)?, n))
}

/// Mean smoothed cross-entropy over non-pad positions.
pub fn loss(g: &mut Graph, logits: Var, targets: &[usize], eps: f32, pad: usize) -> Result<Var> {
    let (sum, n) = sequence_loss(g, logits, targets, eps, pad)?;
    if n == 0 {
        return Err(Error::Config("no scored positions".into()));
    }
    g.scale(sum, 1.0 / n as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_mask_window_rule() {
        let vis = encoder_visibility(6, Some(ChunkMask { left: 2, current: 2, right: 1 })).unwrap();
        // frame 3 (index 2) sits in chunk 2 (frames 3–4): sees frames 1–5
        let row: Vec<bool> = vis[2 * 6..3 * 6].to_vec();
        assert_eq!(row, vec![true, true, true, true, true, false]);
        assert!(encoder_visibility(6, None).is_none());
    }

    #[test]
    fn stacking_pads_last_group() {
        let f = Tensor::matrix(5, 1, vec![1., 2., 3., 4., 5.]).unwrap();
        let s = stack_frames(&f, 4).unwrap();
        assert_eq!(s.shape, vec![2, 4]);
        assert_eq!(s.data, vec![1., 2., 3., 4., 5., 0., 0., 0.]);
        assert!(stack_frames(&Tensor::zeros(&[0, 3]), 4).is_err());
    }

    #[test]
    fn loss_examples() {
        let mut g = Graph::new();
        // uniform logits: loss = ln V for any smoothing
        let l = g.constant(Tensor::zeros(&[2, 5]));
        let v = loss(&mut g, l, &[3, 4], 0.1, 0).unwrap();
        assert!((g.value(v).data[0] - 5f32.ln()).abs() < 1e-6);
        // near one-hot logits, no smoothing: loss → 0
        let mut one_hot = vec![-50.0f32; 5];
        one_hot[2] = 50.0;
        let l = g.constant(Tensor::matrix(1, 5, one_hot).unwrap());
        let v = loss(&mut g, l, &[2], 0.0, 0).unwrap();
        assert!(g.value(v).data[0] < 1e-6);
        // hand-computed smoothed case
        let logits = [1.0f64, 2.0, 0.5, -1.0, 0.0];
        let lse = logits.iter().map(|x| x.exp()).sum::<f64>().ln();
        let logp: Vec<f64> = logits.iter().map(|x| x - lse).collect();
        let want = -(0.9 * logp[1] + 0.025 * (logp[0] + logp[2] + logp[3] + logp[4]));
        let l = g.constant(Tensor::matrix(1, 5, logits.iter().map(|&x| x as f32).collect()).unwrap());
        let v = loss(&mut g, l, &[1], 0.1, 0).unwrap();
        assert!((g.value(v).data[0] as f64 - want).abs() < 1e-6);
        // padding excluded
        let l = g.constant(Tensor::zeros(&[2, 5]));
        let v = loss(&mut g, l, &[3, 0], 0.0, 0).unwrap();
        assert!((g.value(v).data[0] - 5f32.ln()).abs() < 1e-6);
    }
}
