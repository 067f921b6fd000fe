//! Parameter layout of the encoder-decoder.

use rand::Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::monoattn::R_INIT;
use crate::numerics::{ParamId, ParamStore, RngStreams, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub norm_attn: Norm,
    pub attn: Attention,
    pub norm_ff: Norm,
    pub ff: FeedForward,
}

/// Monotonic multihead + chunkwise multihead attention of one layer.
#[derive(Clone, Copy, Debug)]
pub struct Mma {
    pub norm: Norm,
    /// `d_model × d_model`; head `m` uses columns `m·d_k .. (m+1)·d_k`.
    pub w_s: ParamId,
    pub w_h: ParamId,
    /// One learnable offset per MA head.
    pub r: ParamId,
    /// `d_model × H_ca·d_c`; CA head `c` uses columns `c·d_c ..`.
    pub chunk_q: ParamId,
    pub chunk_k: ParamId,
    pub chunk_v: ParamId,
    pub out: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub norm_self: Norm,
    pub self_attn: Attention,
    /// Absent in the bottom `d_lm` layers.
    pub mma: Option<Mma>,
    pub norm_ff: Norm,
    pub ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub frontend: Linear,
    pub encoder: Vec<EncoderLayer>,
    pub enc_norm: Norm,
    pub embed: ParamId,
    pub decoder: Vec<DecoderLayer>,
    pub dec_norm: Norm,
    pub output: Linear,
}

/// Either creates freshly initialised tensors or looks them up by name.
enum Source<'a> {
    Init(&'a mut ParamStore, rand_chacha::ChaCha8Rng),
    Lookup(&'a ParamStore),
}

impl Source<'_> {
    fn get(&mut self, name: String, shape: &[usize], init: Init) -> Result<ParamId> {
        match self {
            Source::Init(store, rng) => {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Xavier => {
                        let (fan_in, fan_out) = (shape[0], shape[shape.len() - 1]);
                        let a = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                        (0..n).map(|_| rng.gen_range(-a..a)).collect()
                    }
                    Init::Const(c) => vec![c; n],
                };
                store.insert(name, Tensor::new(shape.to_vec(), data)?)
            }
            Source::Lookup(store) => {
                let id = store
                    .id(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
                if store.get(id).shape != shape {
                    return Err(Error::Checkpoint(format!(
                        "{name}: expected shape {shape:?}, found {:?}",
                        store.get(id).shape
                    )));
                }
                Ok(id)
            }
        }
    }

    fn linear(&mut self, name: &str, rows: usize, cols: usize, bias: bool) -> Result<Linear> {
        let w = self.get(format!("{name}.w"), &[rows, cols], Init::Xavier)?;
        let b = if bias { Some(self.get(format!("{name}.b"), &[cols], Init::Const(0.0))?) } else { None };
        Ok(Linear { w, b })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            gain: self.get(format!("{name}.gain"), &[d], Init::Const(1.0))?,
            bias: self.get(format!("{name}.bias"), &[d], Init::Const(0.0))?,
        })
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<Attention> {
        Ok(Attention {
            q: self.linear(&format!("{name}.q"), d, d, true)?,
            k: self.linear(&format!("{name}.k"), d, d, true)?,
            v: self.linear(&format!("{name}.v"), d, d, true)?,
            o: self.linear(&format!("{name}.o"), d, d, true)?,
        })
    }

    fn ff(&mut self, name: &str, d: usize, d_ff: usize) -> Result<FeedForward> {
        Ok(FeedForward {
            inner: self.linear(&format!("{name}.inner"), d, d_ff, true)?,
            outer: self.linear(&format!("{name}.outer"), d_ff, d, true)?,
        })
    }
}

#[derive(Clone, Copy)]
enum Init {
    Xavier,
    Const(f32),
}

impl ModelParams {
    /// Fresh parameters: Xavier-uniform matrices, zero biases, unit norm
    /// gains, monotonic offsets at `R_INIT`.
    pub fn init(cfg: &ModelConfig, streams: &RngStreams) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let params = Self::layout(cfg, &mut Source::Init(&mut store, streams.stream("init")))?;
        Ok((params, store))
    }

    /// Resolve the layout against an existing store (e.g. a checkpoint).
    pub fn from_store(cfg: &ModelConfig, store: &ParamStore) -> Result<Self> {
        let p = Self::layout(cfg, &mut Source::Lookup(store))?;
        if store.len() != p.count() {
            return Err(Error::Checkpoint("unexpected extra parameters".into()));
        }
        Ok(p)
    }

    fn count(&self) -> usize {
        let lin = |l: &Linear| 1 + l.b.is_some() as usize;
        let attn = |a: &Attention| lin(&a.q) + lin(&a.k) + lin(&a.v) + lin(&a.o);
        let ff = |f: &FeedForward| lin(&f.inner) + lin(&f.outer);
        let enc: usize = self.encoder.iter().map(|l| 4 + attn(&l.attn) + ff(&l.ff)).sum();
        let dec: usize = self
            .decoder
            .iter()
            .map(|l| 4 + attn(&l.self_attn) + ff(&l.ff) + l.mma.as_ref().map_or(0, |m| 2 + 6 + lin(&m.out)))
            .sum();
        lin(&self.frontend) + enc + 2 + 1 + dec + 2 + lin(&self.output)
    }

    fn layout(cfg: &ModelConfig, src: &mut Source) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let frontend = src.linear("frontend", cfg.d_in * cfg.frame_stack_factor, d, true)?;
        let encoder = (0..cfg.enc_layers)
            .map(|l| {
                Ok(EncoderLayer {
                    norm_attn: src.norm(&format!("enc.{l}.norm_attn"), d)?,
                    attn: src.attention(&format!("enc.{l}.attn"), d)?,
                    norm_ff: src.norm(&format!("enc.{l}.norm_ff"), d)?,
                    ff: src.ff(&format!("enc.{l}.ff"), d, cfg.d_ff)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let enc_norm = src.norm("enc.norm", d)?;
        let embed = src.get("embed".into(), &[cfg.vocab_size, d], Init::Xavier)?;
        let ca_cols = cfg.ca_heads * cfg.d_c();
        let decoder = (0..cfg.dec_layers)
            .map(|l| {
                let norm_self = src.norm(&format!("dec.{l}.norm_self"), d)?;
                let self_attn = src.attention(&format!("dec.{l}.self_attn"), d)?;
                let mma = if cfg.is_mma_layer(l) {
                    let n = format!("dec.{l}.mma");
                    Some(Mma {
                        norm: src.norm(&format!("{n}.norm"), d)?,
                        w_s: src.get(format!("{n}.w_s"), &[d, d], Init::Xavier)?,
                        w_h: src.get(format!("{n}.w_h"), &[d, d], Init::Xavier)?,
                        r: src.get(format!("{n}.r"), &[cfg.ma_heads], Init::Const(R_INIT))?,
                        chunk_q: src.get(format!("{n}.chunk_q"), &[d, ca_cols], Init::Xavier)?,
                        chunk_k: src.get(format!("{n}.chunk_k"), &[d, ca_cols], Init::Xavier)?,
                        chunk_v: src.get(format!("{n}.chunk_v"), &[d, ca_cols], Init::Xavier)?,
                        out: src.linear(&format!("{n}.out"), d, d, true)?,
                    })
                } else {
                    None
                };
                Ok(DecoderLayer {
                    norm_self,
                    self_attn,
                    mma,
                    norm_ff: src.norm(&format!("dec.{l}.norm_ff"), d)?,
                    ff: src.ff(&format!("dec.{l}.ff"), d, cfg.d_ff)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dec_norm = src.norm("dec.norm", d)?;
        let output = src.linear("output", d, cfg.vocab_size, true)?;
        Ok(Self { frontend, encoder, enc_norm, embed, decoder, dec_norm, output })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pruned_layers_have_no_mma_parameters() {
        let cfg = ModelConfig { d_lm: 2, ..Default::default() };
        let (p, store) = ModelParams::init(&cfg, &RngStreams::new(0)).unwrap();
        assert!(p.decoder[0].mma.is_none() && p.decoder[1].mma.is_none());
        assert!(p.decoder[2].mma.is_some() && p.decoder[3].mma.is_some());
        assert!(store.iter().all(|(n, _)| !n.starts_with("dec.0.mma") && !n.starts_with("dec.1.mma")));
        let r = store.get(p.decoder[3].mma.unwrap().r);
        assert_eq!(r.data, vec![-2.0; 4]);
    }

    #[test]
    fn lookup_round_trips_layout() {
        let cfg = ModelConfig::default();
        let (_, store) = ModelParams::init(&cfg, &RngStreams::new(0)).unwrap();
        ModelParams::from_store(&cfg, &store).unwrap();
        let other = ModelConfig { d_lm: 0, ..Default::default() };
        assert!(ModelParams::from_store(&other, &store).is_err());
    }
}
