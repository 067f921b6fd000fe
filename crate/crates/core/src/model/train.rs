use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::Vocab;
use super::forward::{sequence_loss, Forward, Noise};
use super::Model;
use crate::error::{Error, Result};
use crate::monoattn::Mode;
use crate::numerics::{noam_lr, Adam, Graph, OptimConfig, RngStreams, Tensor, Var};

/// One utterance: raw frames and its symbol sequence (without sos/eos).
#[derive(Clone, Debug)]
pub struct Example {
    pub frames: Tensor,
    pub symbols: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 3000, batch_size: 16, optim: OptimConfig::default() }
    }
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    adam: Adam,
    streams: RngStreams,
    step: u64,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub step: u64,
    pub loss: f32,
    pub lr: f32,
    pub grad_norm: f32,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, streams: RngStreams) -> Self {
        Self { model, cfg, adam: Adam::new(), streams, step: 0, order: Vec::new(), cursor: 0, epoch: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Forward, backward and one optimizer update over `batch`. Returns the
    /// mean per-token loss.
    pub fn train_step(&mut self, batch: &[&Example]) -> Result<StepStats> {
        self.train_step_with_lr(batch, None)
    }

    pub fn train_step_with_lr(&mut self, batch: &[&Example], lr_override: Option<f32>) -> Result<StepStats> {
        let step = self.step + 1;
        let model = &mut self.model;
        let vocab = Vocab::from_model_size(model.config.vocab_size);
        let mut dropout = self.streams.substream("dropout", step);
        let mut selection = self.streams.substream("selection", step);
        let mut headdrop = self.streams.substream("headdrop", step);

        let mut g = Graph::new();
        let bound = model.store.bind(&mut g);
        let mut sums: Vec<Var> = Vec::with_capacity(batch.len());
        let mut count = 0usize;
        {
            let mut fwd = Forward {
                cfg: &model.config,
                params: &model.params,
                bound: &bound,
                mode: Mode::Train,
                noise: Some(Noise { dropout: &mut dropout, selection: &mut selection, headdrop: &mut headdrop }),
            };
            for ex in batch {
                let seq = vocab.wrap(&ex.symbols);
                let h = fwd.encode(&mut g, &ex.frames)?;
                let (logits, _) = fwd.decode_train(&mut g, h, &seq[..seq.len() - 1])?;
                let (s, n) = sequence_loss(&mut g, logits, &seq[1..], model.config.label_smoothing, Vocab::PAD)?;
                sums.push(s);
                count += n;
            }
        }
        if count == 0 {
            return Err(Error::Config("batch has no target tokens".into()));
        }
        let mut total = sums[0];
        for &s in &sums[1..] {
            total = g.add(total, s)?;
        }
        let loss = g.scale(total, 1.0 / count as f32)?;
        let loss_value = g.value(loss).data[0];
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        g.backward(loss)?;
        model.store.collect_grads(&g, &bound);
        drop(g);

        let lr = lr_override.unwrap_or_else(|| {
            noam_lr(step, model.config.d_model, self.cfg.optim.warmup, self.cfg.optim.constant)
        });
        let grad_norm = self.adam.step(model.store.tensors_mut(), step, lr, &self.cfg.optim)?;
        model.store.zero_grads();
        self.step = step;
        Ok(StepStats { step, loss: loss_value, lr, grad_norm })
    }

    /// Next minibatch from an epoch-wise shuffle of `data`.
    pub fn next_batch<'d>(&mut self, data: &'d [Example]) -> Vec<&'d Example> {
        let mut out = Vec::with_capacity(self.cfg.batch_size);
        while out.len() < self.cfg.batch_size.min(data.len()) {
            if self.cursor >= self.order.len() {
                self.order = (0..data.len()).collect();
                self.order.shuffle(&mut self.streams.substream("batches", self.epoch));
                self.epoch += 1;
                self.cursor = 0;
            }
            out.push(&data[self.order[self.cursor]]);
            self.cursor += 1;
        }
        out
    }

    /// Run `cfg.steps` updates, calling `log` after each.
    pub fn fit(&mut self, data: &[Example], mut log: impl FnMut(&StepStats)) -> Result<Vec<StepStats>> {
        if data.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let mut stats = Vec::with_capacity(self.cfg.steps as usize);
        while self.step < self.cfg.steps {
            let batch = self.next_batch(data);
            let s = self.train_step(&batch)?;
            log(&s);
            stats.push(s);
        }
        Ok(stats)
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}
