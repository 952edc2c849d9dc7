//! Asymmetric calibration reward.
//!
//! ```text
//! r = ln(min(1, max(p, eps)))                  correct answer
//!     ln(min(1, max(1 - p, eps))) - offset     wrong answer
//!     ln(eps_penalty)                          unparseable output
//! ```
//!
//! Confident mistakes cost the most; the format penalty sits below every
//! reachable valid reward.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Prediction;

#[derive(Debug, Error, PartialEq)]
pub enum RewardConfigError {
    #[error("need 0 < epsilon_penalty < epsilon < 1, got epsilon={epsilon}, epsilon_penalty={epsilon_penalty}")]
    Epsilons { epsilon: f64, epsilon_penalty: f64 },
    #[error("incorrect_offset must be finite and >= 0, got {0}")]
    Offset(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub epsilon: f64,
    pub epsilon_penalty: f64,
    pub incorrect_offset: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            epsilon: 1e-10,
            epsilon_penalty: 1e-12,
            incorrect_offset: 1.0,
        }
    }
}

impl RewardConfig {
    pub fn new(
        epsilon: f64,
        epsilon_penalty: f64,
        incorrect_offset: f64,
    ) -> Result<Self, RewardConfigError> {
        let cfg = RewardConfig {
            epsilon,
            epsilon_penalty,
            incorrect_offset,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RewardConfigError> {
        let (e, ep) = (self.epsilon, self.epsilon_penalty);
        if !(0.0 < ep && ep < e && e < 1.0) {
            return Err(RewardConfigError::Epsilons {
                epsilon: e,
                epsilon_penalty: ep,
            });
        }
        if !(self.incorrect_offset.is_finite() && self.incorrect_offset >= 0.0) {
            return Err(RewardConfigError::Offset(self.incorrect_offset));
        }
        Ok(())
    }

    /// Reward for an unparseable response.
    pub fn invalid_reward(&self) -> f64 {
        self.epsilon_penalty.ln()
    }
}

/// Scores a prediction against the ground truth. Finite for every input,
/// including confidences outside `[0, 1]` (the clamps handle them) and NaN
/// (treated as the epsilon floor).
pub fn compute_reward(prediction: &Prediction, truth_index: usize, cfg: &RewardConfig) -> f64 {
    match prediction {
        Prediction::Valid {
            answer_index,
            confidence,
        } => {
            if *answer_index == truth_index {
                clamp_log(*confidence, cfg.epsilon)
            } else {
                clamp_log(1.0 - confidence, cfg.epsilon) - cfg.incorrect_offset
            }
        }
        Prediction::Invalid { .. } => cfg.invalid_reward(),
    }
}

fn clamp_log(x: f64, epsilon: f64) -> f64 {
    // f64::max returns epsilon when x is NaN
    x.max(epsilon).min(1.0).ln()
}
