//! Transformer encoder-decoder with monotonic chunkwise multihead attention.

pub mod config;
pub mod forward;
pub mod infer;
pub mod params;
pub mod train;

use std::path::Path;

pub use config::{ChunkMask, ModelConfig, Vocab};
pub use forward::{Forward, LayerAlignment};
pub use params::ModelParams;
pub use train::{Example, StepStats, TrainConfig, Trainer};

use crate::error::{Error, Result};
use crate::monoattn::Mode;
use crate::numerics::{checkpoint, Graph, ParamStore, RngStreams, Tensor};

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub store: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, streams: &RngStreams) -> Result<Self> {
        let (params, store) = ModelParams::init(&config, streams)?;
        Ok(Self { config, params, store })
    }

    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let params = ModelParams::from_store(&config, &store)?;
        Ok(Self { config, params, store })
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::from_model_size(self.config.vocab_size)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "model": self.config });
        checkpoint::save(path, &meta, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, store) = checkpoint::load(path)?;
        let cfg: ModelConfig = serde_json::from_value(
            meta.get("model").cloned().ok_or_else(|| Error::Checkpoint("metadata lacks model config".into()))?,
        )?;
        Self::from_store(cfg, store)
    }

    /// Test-mode encoder output `[T × d_model]`.
    pub fn encode(&self, frames: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let bound = self.store.bind(&mut g);
        let mut fwd = Forward { cfg: &self.config, params: &self.params, bound: &bound, mode: Mode::Test, noise: None };
        let h = fwd.encode(&mut g, frames)?;
        Ok(g.value(h).clone())
    }

    /// Test-mode teacher forcing: logits for `[sos, symbols…]` and the
    /// noise-free expected alignments of every MMA layer.
    pub fn teacher_forced(&self, frames: &Tensor, symbols: &[usize]) -> Result<(Tensor, Vec<LayerAlignment>)> {
        let mut g = Graph::inference();
        let bound = self.store.bind(&mut g);
        let mut fwd = Forward { cfg: &self.config, params: &self.params, bound: &bound, mode: Mode::Test, noise: None };
        let h = fwd.encode(&mut g, frames)?;
        let seq = self.vocab().wrap(symbols);
        let (logits, al) = fwd.decode_train(&mut g, h, &seq[..seq.len() - 1])?;
        Ok((g.value(logits).clone(), al))
    }
}
