use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam with the inverse-square-root warmup schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub warmup: u64,
    pub constant: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f32>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            warmup: 400,
            constant: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: Some(5.0),
        }
    }
}

/// `constant · d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`
pub fn noam_lr(step: u64, d_model: usize, warmup: u64, constant: f32) -> f32 {
    assert!(step >= 1, "schedule steps start at 1");
    let s = step as f64;
    let w = warmup.max(1) as f64;
    let lr = constant as f64 * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5));
    lr as f32
}

#[derive(Clone, Debug, Default)]
pub struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update from the `grad` fields of `params`. Nothing is modified if
    /// any gradient is non-finite. Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut [Tensor], step: u64, lr: f32, cfg: &OptimConfig) -> Result<f32> {
        if step == 0 {
            return Err(Error::Config("optimizer steps start at 1".into()));
        }
        let mut sq = 0.0f64;
        for (i, p) in params.iter().enumerate() {
            let Some(g) = &p.grad else { continue };
            for &x in g {
                if !x.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of parameter #{i}")));
                }
                sq += (x as f64) * (x as f64);
            }
        }
        let norm = sq.sqrt() as f32;
        let clip = match cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        let (b1, b2) = (cfg.beta1 as f64, cfg.beta2 as f64);
        let c1 = 1.0 - b1.powi(step as i32);
        let c2 = 1.0 - b2.powi(step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = p.grad.as_ref() else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let gj = (g[j] * clip) as f64;
                let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
                let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let upd = lr as f64 * (mj / c1) / ((vj / c2).sqrt() + cfg.eps as f64);
                p.data[j] = (p.data[j] as f64 - upd) as f32;
            }
        }
        Ok(norm)
    }
}
