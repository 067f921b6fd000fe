//! Incremental test-time decoder.
//!
//! One call to [`step_batch`] advances a batch of hypotheses by one output
//! step. Self-attention keys and values are cached per hypothesis; linear
//! layers run over all hypotheses at once. Monotonic heads find their hard
//! boundaries through a [`BoundarySearch`] policy, which only ever sees
//! probabilities for frames it asks for.

use super::forward::positional_encoding;
use super::params::{Attention, FeedForward, Linear, Norm};
use super::Model;
use crate::error::{shape_err, Result};
use crate::monoattn::{energy_at, Mode};
use crate::numerics::{kernels, ops, Graph, Tensor};

/// Encoder output plus the per-layer projections the monotonic and chunk
/// heads read from.
#[derive(Clone, Debug)]
pub struct EncoderMemory {
    pub h: Tensor,
    pub layers: Vec<Option<MmaMemory>>,
}

#[derive(Clone, Debug)]
pub struct MmaMemory {
    /// `h · W_h`, `[T × d_model]`.
    pub mono_keys: Tensor,
    /// `h · W_ck`, `[T × H_ca·d_c]`.
    pub chunk_keys: Tensor,
    pub chunk_values: Tensor,
}

impl EncoderMemory {
    pub fn frames(&self) -> usize {
        self.h.rows()
    }
}

/// Per-hypothesis decoder state.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    /// Per layer, cached self-attention keys/values (`len × d_model`, flat).
    pub keys: Vec<Vec<f32>>,
    pub values: Vec<Vec<f32>>,
    pub len: usize,
    /// Per MMA layer, per head: last boundary (1-based), starting at 1.
    pub boundaries: Vec<Vec<usize>>,
}

/// Result of scanning one head at one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadOutcome {
    /// Attended frame (1-based); `None` if the head never activated.
    pub boundary: Option<usize>,
    pub forced: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSearch {
    pub heads: Vec<HeadOutcome>,
    /// Highest frame whose selection probability was evaluated.
    pub frames_read: usize,
}

/// How the heads of one MMA layer locate their boundaries.
pub trait BoundarySearch {
    /// `prev[h]` is head `h`'s previous boundary; `prob(h, j)` evaluates
    /// `p` for head `h` at frame `j` (1-based). `frames` is `T`.
    fn search(&self, prev: &[usize], frames: usize, prob: &mut dyn FnMut(usize, usize) -> f32) -> LayerSearch;
}

#[derive(Clone, Debug)]
pub struct StepResult {
    /// Log-probabilities over the model vocabulary.
    pub log_probs: Vec<f32>,
    pub state: DecoderState,
    /// One entry per MMA layer, bottom-up.
    pub layers: Vec<LayerSearch>,
    /// Highest encoder frame touched this step (selection or chunk window).
    pub frames_read: usize,
}

impl Model {
    /// Encode and precompute the projections used by every decode step.
    pub fn memory(&self, frames: &Tensor) -> Result<EncoderMemory> {
        let h = self.encode(frames)?;
        let layers = self
            .params
            .decoder
            .iter()
            .map(|l| {
                l.mma.as_ref().map(|m| MmaMemory {
                    mono_keys: ops::matmul(&h, self.store.get(m.w_h)).expect("shape checked at init"),
                    chunk_keys: ops::matmul(&h, self.store.get(m.chunk_k)).expect("shape checked at init"),
                    chunk_values: ops::matmul(&h, self.store.get(m.chunk_v)).expect("shape checked at init"),
                })
            })
            .collect();
        Ok(EncoderMemory { h, layers })
    }

    pub fn initial_state(&self) -> DecoderState {
        let cfg = &self.config;
        let mma_layers = cfg.dec_layers - cfg.d_lm;
        DecoderState {
            keys: vec![Vec::new(); cfg.dec_layers],
            values: vec![Vec::new(); cfg.dec_layers],
            len: 0,
            boundaries: vec![vec![1; cfg.ma_heads]; mma_layers],
        }
    }

    fn linear_rows(&self, x: &[f32], rows: usize, l: &Linear) -> Vec<f32> {
        let w = self.store.get(l.w);
        let (k, n) = (w.shape[0], w.shape[1]);
        let mut y = kernels::gemm_nn(x, &w.data, rows, k, n);
        if let Some(b) = l.b {
            let b = &self.store.get(b).data;
            for (i, v) in y.iter_mut().enumerate() {
                *v += b[i % n];
            }
        }
        y
    }

    fn norm_rows(&self, x: &[f32], rows: usize, n: &Norm) -> Vec<f32> {
        let d = x.len() / rows;
        let t = Tensor { shape: vec![rows, d], data: x.to_vec(), grad: None, requires_grad: false };
        ops::layer_norm(&t, &self.store.get(n.gain).data, &self.store.get(n.bias).data, ops::LAYER_NORM_EPS)
            .expect("norm shape fixed at init")
            .data
    }

    fn ff_rows(&self, x: &[f32], rows: usize, f: &FeedForward) -> Vec<f32> {
        let mut hid = self.linear_rows(x, rows, &f.inner);
        hid.iter_mut().for_each(|v| *v = v.max(0.0));
        self.linear_rows(&hid, rows, &f.outer)
    }

    /// Self-attention of the newest position of each hypothesis over its cache.
    fn self_attention(&self, y: &[f32], states: &mut [DecoderState], layer: usize, a: &Attention) -> Vec<f32> {
        let d = self.config.d_model;
        let heads = self.config.heads;
        let dk = d / heads;
        let n = states.len();
        let q = self.linear_rows(y, n, &a.q);
        let k = self.linear_rows(y, n, &a.k);
        let v = self.linear_rows(y, n, &a.v);
        let mut ctx = vec![0.0f32; n * d];
        let scale = 1.0 / (dk as f64).sqrt();
        for (b, st) in states.iter_mut().enumerate() {
            st.keys[layer].extend_from_slice(&k[b * d..(b + 1) * d]);
            st.values[layer].extend_from_slice(&v[b * d..(b + 1) * d]);
            let len = st.keys[layer].len() / d;
            let mut scores = vec![0.0f32; len];
            let mut probs = vec![0.0f32; len];
            for hd in 0..heads {
                let qh = &q[b * d + hd * dk..b * d + (hd + 1) * dk];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kh = &st.keys[layer][j * d + hd * dk..j * d + (hd + 1) * dk];
                    *s = (kernels::dot(qh, kh) * scale) as f32;
                }
                kernels::softmax_row(&scores, None, &mut probs);
                let out = &mut ctx[b * d + hd * dk..b * d + (hd + 1) * dk];
                let mut acc = vec![0.0f64; dk];
                for (j, &pj) in probs.iter().enumerate() {
                    let vh = &st.values[layer][j * d + hd * dk..j * d + (hd + 1) * dk];
                    for (a, &vv) in acc.iter_mut().zip(vh) {
                        *a += pj as f64 * vv as f64;
                    }
                }
                for (o, a) in out.iter_mut().zip(acc) {
                    *o = a as f32;
                }
            }
        }
        self.linear_rows(&ctx, n, &a.o)
    }

    /// Advance each hypothesis by one token. `tokens[b]` is the last token
    /// of hypothesis `b`; every state must have the same length.
    pub fn step_batch(
        &self,
        mem: &EncoderMemory,
        states: &[&DecoderState],
        tokens: &[usize],
        search: &dyn BoundarySearch,
    ) -> Result<Vec<StepResult>> {
        let cfg = &self.config;
        let n = states.len();
        if n == 0 || tokens.len() != n {
            return shape_err("step_batch", format!("{n} states, {} tokens", tokens.len()));
        }
        let pos = states[0].len;
        if states.iter().any(|s| s.len != pos) {
            return shape_err("step_batch", "hypotheses of different lengths");
        }
        let d = cfg.d_model;
        let t_frames = mem.frames();
        let mut next: Vec<DecoderState> = states.iter().map(|s| (*s).clone()).collect();

        let embed = self.store.get(self.params.embed);
        let pe = positional_encoding(pos + 1, d);
        let sqrt_d = (d as f32).sqrt();
        let mut x = Vec::with_capacity(n * d);
        for &tok in tokens {
            if tok >= cfg.vocab_size {
                return shape_err("step_batch", format!("token {tok} outside vocabulary"));
            }
            x.extend(embed.row(tok).iter().zip(pe.row(pos)).map(|(&e, &p)| e * sqrt_d + p));
        }

        let mut searches: Vec<Vec<LayerSearch>> = vec![Vec::new(); n];
        let mut frames_read = vec![0usize; n];
        let mut mma_index = 0;
        for (l, layer) in self.params.decoder.iter().enumerate() {
            let y = self.norm_rows(&x, n, &layer.norm_self);
            let a = self.self_attention(&y, &mut next, l, &layer.self_attn);
            x.iter_mut().zip(&a).for_each(|(xv, av)| *xv += av);

            if let (Some(m), Some(mm)) = (&layer.mma, &mem.layers[l]) {
                let y = self.norm_rows(&x, n, &m.norm);
                let q = kernels::gemm_nn(&y, &self.store.get(m.w_s).data, n, d, d);
                let ca_cols = cfg.ca_heads * cfg.d_c();
                let cq = kernels::gemm_nn(&y, &self.store.get(m.chunk_q).data, n, d, ca_cols);
                let r = &self.store.get(m.r).data;
                let dk = cfg.d_k();
                let dc = cfg.d_c();
                let mut ctx = vec![0.0f32; n * d];
                for b in 0..n {
                    let qb = &q[b * d..(b + 1) * d];
                    let mut hw = 0usize;
                    let mut prob = |head: usize, j: usize| -> f32 {
                        hw = hw.max(j);
                        let key = &mm.mono_keys.row(j - 1)[head * dk..(head + 1) * dk];
                        kernels::sigmoid(energy_at(&qb[head * dk..(head + 1) * dk], key, r[head]))
                    };
                    let found = search.search(&next[b].boundaries[mma_index], t_frames, &mut prob);
                    let mut read = hw;
                    for (head, outcome) in found.heads.iter().enumerate() {
                        let Some(tb) = outcome.boundary else { continue };
                        read = read.max(tb);
                        next[b].boundaries[mma_index][head] = tb;
                        let lo = tb.saturating_sub(cfg.chunk_width) + 1;
                        for c in 0..cfg.ca_heads {
                            let qc = &cq[b * ca_cols + c * dc..b * ca_cols + (c + 1) * dc];
                            let energies: Vec<f32> = (lo..=tb)
                                .map(|j| energy_at(qc, &mm.chunk_keys.row(j - 1)[c * dc..(c + 1) * dc], 0.0))
                                .collect();
                            let mut w = vec![0.0f32; energies.len()];
                            kernels::softmax_row(&energies, None, &mut w);
                            let off = b * d + (head * cfg.ca_heads + c) * dc;
                            let mut acc = vec![0.0f64; dc];
                            for (wi, j) in w.iter().zip(lo..=tb) {
                                let vrow = &mm.chunk_values.row(j - 1)[c * dc..(c + 1) * dc];
                                for (a, &v) in acc.iter_mut().zip(vrow) {
                                    *a += *wi as f64 * v as f64;
                                }
                            }
                            for (o, a) in ctx[off..off + dc].iter_mut().zip(acc) {
                                *o = a as f32;
                            }
                        }
                    }
                    frames_read[b] = frames_read[b].max(read).max(found.frames_read);
                    searches[b].push(found);
                }
                let out = self.linear_rows(&ctx, n, &m.out);
                x.iter_mut().zip(&out).for_each(|(xv, ov)| *xv += ov);
                mma_index += 1;
            }

            let y = self.norm_rows(&x, n, &layer.norm_ff);
            let f = self.ff_rows(&y, n, &layer.ff);
            x.iter_mut().zip(&f).for_each(|(xv, fv)| *xv += fv);
        }
        let x = self.norm_rows(&x, n, &self.params.dec_norm);
        let logits = self.linear_rows(&x, n, &self.params.output);
        let v = cfg.vocab_size;
        Ok(next
            .into_iter()
            .zip(searches)
            .zip(frames_read)
            .enumerate()
            .map(|(b, ((mut state, layers), frames_read))| {
                state.len += 1;
                StepResult { log_probs: kernels::log_softmax_row(&logits[b * v..(b + 1) * v]), state, layers, frames_read }
            })
            .collect())
    }

    /// Test-mode graph encoder, exposed for callers that want the tape.
    pub fn encode_graph(&self, g: &mut Graph, frames: &Tensor) -> Result<crate::numerics::Var> {
        let bound = self.store.bind(g);
        let mut fwd = super::Forward { cfg: &self.config, params: &self.params, bound: &bound, mode: Mode::Test, noise: None };
        fwd.encode(g, frames)
    }
}
