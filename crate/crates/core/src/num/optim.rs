//! AdamW with decoupled weight decay, plus the cosine learning-rate
//! schedule used by every training loop.

use std::collections::BTreeMap;

use crate::num::nn::Params;
use crate::num::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamW { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient entry are left untouched
    /// (and not decayed): decay is coupled to participation so frozen
    /// branches stay frozen.
    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            debug_assert_eq!(g.len(), p.len(), "grad shape for {name}");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * gi;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= lr * (mhat / (vhat.sqrt() + self.cfg.eps)
                    + self.cfg.weight_decay * p.data[i]);
            }
        }
    }

    /// Moment tensors for checkpointing, prefixed `adam.m.` / `adam.v.`.
    pub fn export_state(&self, params: &Params) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, buf) in self.m.iter().map(|(n, b)| (format!("adam.m.{n}"), b)) {
            let shape = params.get(name.trim_start_matches("adam.m.")).ok();
            if let Some(t) = shape {
                out.insert(name, Tensor { rows: t.rows, cols: t.cols, data: buf.clone() });
            }
        }
        for (name, buf) in self.v.iter().map(|(n, b)| (format!("adam.v.{n}"), b)) {
            let shape = params.get(name.trim_start_matches("adam.v.")).ok();
            if let Some(t) = shape {
                out.insert(name, Tensor { rows: t.rows, cols: t.cols, data: buf.clone() });
            }
        }
        out
    }

    pub fn import_state(&mut self, step: u64, state: &BTreeMap<String, Tensor>) {
        self.step = step;
        for (name, t) in state {
            if let Some(base) = name.strip_prefix("adam.m.") {
                self.m.insert(base.to_string(), t.data.clone());
            } else if let Some(base) = name.strip_prefix("adam.v.") {
                self.v.insert(base.to_string(), t.data.clone());
            }
        }
    }
}

/// Cosine annealing over epochs. Epoch 0 yields `base`, the final epoch
/// yields `floor`; a single-epoch run stays at `base`.
pub fn cosine_lr(base: f64, floor: f64, epoch: usize, total_epochs: usize) -> f64 {
    let denom = total_epochs.saturating_sub(1).max(1) as f64;
    let phase = std::f64::consts::PI * epoch as f64 / denom;
    floor + 0.5 * (base - floor) * (1.0 + phase.cos())
}
