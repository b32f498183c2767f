//! Persona adapter: a small cross-attention transformer that reads persona
//! traits plus utterance tokens and predicts the 5-vector prosody target,
//! a rationale-space alignment vector, a contrastive prosody embedding,
//! and the downstream control signals.

pub mod losses;
pub mod model;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use losses::{contrastive_loss, distill_loss};
pub use model::AdapterModel;
pub use train::{train_adapter, AdapterStage, EpochLog};

pub const PROSODY_DIM: usize = 5;
pub const Z_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub rationale_dim: usize,
    pub prosody_dim: usize,
    pub lambda_sem: f64,
    pub lambda_con: f64,
    pub tau: f64,
    pub epochs: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub batch_size: usize,
    /// Read the hybrid-loss norms as squared distances instead of plain
    /// Euclidean ones.
    pub squared_norms: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl AdapterConfig {
    /// Desk preset: trains in seconds on the default corpus.
    pub fn desk() -> Self {
        AdapterConfig {
            num_layers: 2,
            hidden_dim: 64,
            num_heads: 4,
            rationale_dim: crate::corpus::RATIONALE_DIM,
            prosody_dim: PROSODY_DIM,
            lambda_sem: 0.5,
            lambda_con: 0.3,
            tau: 0.07,
            epochs: 12,
            lr: 1e-3,
            lr_floor: 1e-5,
            batch_size: 16,
            squared_norms: false,
        }
    }

    /// Full-scale preset matching the published hyperparameters.
    pub fn full_scale() -> Self {
        AdapterConfig {
            num_layers: 4,
            hidden_dim: 512,
            num_heads: 8,
            epochs: 100,
            lr: 1e-4,
            lr_floor: 1e-6,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.lambda_sem < 0.0 || self.lambda_con < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlParams {
    pub delta_f0: f64,
    pub delta_e: f64,
    pub duration_scale: f64,
    pub pause_scale: f64,
}

impl ControlParams {
    pub fn identity() -> Self {
        ControlParams { delta_f0: 0.0, delta_e: 0.0, duration_scale: 1.0, pause_scale: 1.0 }
    }
}

/// Map the predicted 5-vector (V, A, D, f0_rel, e_rel) to control signals.
/// Arousal speeds speech up and suppresses pauses; low valence adds pauses.
pub fn control_from_phat(p_hat: &[f64; 5]) -> ControlParams {
    let valence = p_hat[0];
    let arousal = p_hat[1];
    ControlParams {
        delta_f0: p_hat[3],
        delta_e: p_hat[4],
        duration_scale: (1.0 / (0.6 + 0.8 * arousal)).clamp(0.5, 2.0),
        pause_scale: (1.0 - arousal + 0.5 * (1.0 - valence)).clamp(0.0, 2.0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterOutput {
    /// (valence, arousal, dominance, f0_rel, e_rel), clamped to domain.
    pub p_hat: [f64; 5],
    /// Rationale-space alignment vector.
    pub h_adapter: Vec<f64>,
    /// Contrastive prosody embedding.
    pub z: Vec<f64>,
    pub control: ControlParams,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn control_hand_values() {
        let c = control_from_phat(&[1.0, 0.5, 0.5, 0.0, 0.0]);
        assert_abs_diff_eq!(c.duration_scale, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.pause_scale, 0.5, epsilon = 1e-12);
        assert_eq!(c.delta_f0, 0.0);
        assert_eq!(c.delta_e, 0.0);
    }

    #[test]
    fn high_arousal_speeds_speech_up() {
        let c = control_from_phat(&[0.5, 1.0, 0.5, 0.1, 0.2]);
        assert_abs_diff_eq!(c.duration_scale, 1.0 / 1.4, epsilon = 1e-12);
        assert_eq!(c.delta_f0, 0.1);
        assert_eq!(c.delta_e, 0.2);
    }

    #[test]
    fn control_ranges_hold_on_the_whole_domain() {
        for a in [0.0, 0.25, 0.5, 0.75, 1.0] {
            for v in [0.0, 0.5, 1.0] {
                let c = control_from_phat(&[v, a, 0.5, -1.0, 1.0]);
                assert!((0.5..=2.0).contains(&c.duration_scale));
                assert!((0.0..=2.0).contains(&c.pause_scale));
            }
        }
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let mut cfg = AdapterConfig::desk();
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = AdapterConfig::desk();
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
        assert!(AdapterConfig::desk().validate().is_ok());
        assert!(AdapterConfig::full_scale().validate().is_ok());
    }
}
