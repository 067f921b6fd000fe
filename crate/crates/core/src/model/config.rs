use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Restricts encoder self-attention to chunks of `current` frames plus
/// `left` frames of history and `right` frames of look-ahead.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkMask {
    pub left: usize,
    pub current: usize,
    pub right: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input feature size per raw frame.
    pub d_in: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Encoder and decoder self-attention heads.
    pub heads: usize,
    /// Monotonic attention heads per MMA layer.
    pub ma_heads: usize,
    /// Chunkwise attention heads, shared by the MA heads of a layer.
    pub ca_heads: usize,
    /// Chunk width `w` in frames.
    pub chunk_width: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Number of bottom decoder layers without an MMA sub-layer.
    pub d_lm: usize,
    /// HeadDrop probability.
    pub p_hd: f32,
    pub frame_stack_factor: usize,
    /// Model vocabulary, including pad/sos/eos.
    pub vocab_size: usize,
    pub label_smoothing: f32,
    pub dropout: f32,
    /// Std of the pre-sigmoid Gaussian noise on monotonic energies in training.
    pub noise_std: f32,
    pub chunk_mask: Option<ChunkMask>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: 8,
            d_model: 64,
            d_ff: 256,
            heads: 4,
            ma_heads: 4,
            ca_heads: 1,
            chunk_width: 4,
            enc_layers: 4,
            dec_layers: 4,
            d_lm: 3,
            p_hd: 0.5,
            frame_stack_factor: 4,
            vocab_size: 23,
            label_smoothing: 0.1,
            dropout: 0.1,
            noise_std: 1.0,
            chunk_mask: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dec_layers == 0 || self.d_lm > self.dec_layers - 1 {
            return fail(format!("d_lm must be in 0..={} (got {})", self.dec_layers.saturating_sub(1), self.d_lm));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        let ca_total = self.ma_heads * self.ca_heads;
        if ca_total == 0 || self.d_model % ca_total != 0 {
            return fail(format!("d_model {} not divisible by ma_heads·ca_heads {}", self.d_model, ca_total));
        }
        if self.d_model % self.ma_heads != 0 {
            return fail(format!("d_model {} not divisible by ma_heads {}", self.d_model, self.ma_heads));
        }
        if self.chunk_width == 0 || self.frame_stack_factor == 0 || self.d_in == 0 {
            return fail("chunk_width, frame_stack_factor and d_in must be positive".into());
        }
        if self.vocab_size < 4 {
            return fail("vocab_size must cover pad/sos/eos and at least one symbol".into());
        }
        if !(0.0..1.0).contains(&self.p_hd) || !(0.0..1.0).contains(&self.dropout) {
            return fail("p_hd and dropout must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) || self.noise_std < 0.0 {
            return fail("label_smoothing must lie in [0, 1) and noise_std ≥ 0".into());
        }
        if let Some(m) = self.chunk_mask {
            if m.current == 0 {
                return fail("chunk_mask.current must be positive".into());
            }
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.ma_heads
    }

    pub fn d_c(&self) -> usize {
        self.d_model / (self.ma_heads * self.ca_heads)
    }

    pub fn is_mma_layer(&self, layer: usize) -> bool {
        layer >= self.d_lm
    }

    /// `(D − D_lm) · H_ma`
    pub fn total_ma_heads(&self) -> usize {
        (self.dec_layers - self.d_lm) * self.ma_heads
    }

    pub fn encoded_len(&self, raw_frames: usize) -> usize {
        raw_frames.div_ceil(self.frame_stack_factor)
    }
}

/// Token ids: 0 pad, 1 sos, 2 eos, then task symbols.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub symbols: usize,
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const SOS: usize = 1;
    pub const EOS: usize = 2;
    const OFFSET: usize = 3;

    pub fn from_model_size(vocab_size: usize) -> Self {
        Self { symbols: vocab_size - Self::OFFSET }
    }

    pub fn size(&self) -> usize {
        self.symbols + Self::OFFSET
    }

    pub fn encode(&self, symbol: usize) -> usize {
        symbol + Self::OFFSET
    }

    /// `None` for the special tokens.
    pub fn decode(&self, id: usize) -> Option<usize> {
        id.checked_sub(Self::OFFSET)
    }

    /// `[sos, s_1, …, s_U, eos]`
    pub fn wrap(&self, symbols: &[usize]) -> Vec<usize> {
        let mut out = Vec::with_capacity(symbols.len() + 2);
        out.push(Self::SOS);
        out.extend(symbols.iter().map(|&s| self.encode(s)));
        out.push(Self::EOS);
        out
    }
}
