use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Backend, BackendError, GenerationParams};
use crate::data::{option_letter, Query};
use crate::seed::{derive_seed, sha256_hex};

/// Shift applied to accuracy and confidence when `trigger_phrase` occurs in the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEffect {
    pub trigger_phrase: String,
    #[serde(default)]
    pub accuracy_delta: f64,
    #[serde(default)]
    pub conf_delta: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum ProfileError {
    #[error("{field} must be in [0, 1], got {value}")]
    OutOfUnit { field: &'static str, value: f64 },
    #[error("{field} must be finite, got {value}")]
    NotFinite { field: &'static str, value: f64 },
    #[error("trigger phrases must be non-empty")]
    EmptyTrigger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatorProfile {
    pub base_accuracy: f64,
    pub base_conf_mean: f64,
    /// Half-width of the uniform confidence jitter around the mean.
    pub base_conf_spread: f64,
    pub feature_effects: Vec<FeatureEffect>,
    pub invalid_rate: f64,
    /// Ignore the per-call seed, as a model decoding greedily would.
    pub deterministic: bool,
    /// Decimal places of the emitted percentage (0 emits integers).
    pub confidence_decimals: u32,
}

impl Default for SimulatorProfile {
    fn default() -> Self {
        SimulatorProfile {
            base_accuracy: 0.5,
            base_conf_mean: 0.9,
            base_conf_spread: 0.1,
            feature_effects: Vec::new(),
            invalid_rate: 0.0,
            deterministic: false,
            confidence_decimals: 0,
        }
    }
}

impl SimulatorProfile {
    pub fn validate(&self) -> Result<(), ProfileError> {
        for (field, value) in [
            ("base_accuracy", self.base_accuracy),
            ("base_conf_mean", self.base_conf_mean),
            ("invalid_rate", self.invalid_rate),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(ProfileError::OutOfUnit { field, value });
            }
        }
        if !(self.base_conf_spread.is_finite() && self.base_conf_spread >= 0.0) {
            return Err(ProfileError::NotFinite {
                field: "base_conf_spread",
                value: self.base_conf_spread,
            });
        }
        for fx in &self.feature_effects {
            if fx.trigger_phrase.is_empty() {
                return Err(ProfileError::EmptyTrigger);
            }
            for (field, value) in [("accuracy_delta", fx.accuracy_delta), ("conf_delta", fx.conf_delta)] {
                if !value.is_finite() {
                    return Err(ProfileError::NotFinite { field, value });
                }
            }
        }
        Ok(())
    }

    /// Accuracy and mean confidence after applying every matching trigger, clamped to `[0, 1]`.
    pub fn effective(&self, prompt: &str) -> (f64, f64) {
        let (mut acc, mut conf) = (self.base_accuracy, self.base_conf_mean);
        for fx in self.feature_effects.iter().filter(|fx| prompt.contains(&fx.trigger_phrase)) {
            acc += fx.accuracy_delta;
            conf += fx.conf_delta;
        }
        (acc.clamp(0.0, 1.0), conf.clamp(0.0, 1.0))
    }
}

const GARBLED: [&str; 4] = [
    "I am unable to determine the answer from the provided image.",
    "Answer: unclear\nConfidence: high",
    "The image appears to show several structures; more context is needed.",
    "Options considered. Final decision pending.",
];

/// Seeded downstream-model stand-in.
///
/// Output is a pure function of (profile, prompt, seed). Correctness needs the
/// ground truth, so the simulator holds an answer key from question text to
/// truth index; questions missing from the key are scored against option A.
#[derive(Debug, Clone)]
pub struct Simulator {
    profile: SimulatorProfile,
    answer_key: HashMap<String, usize>,
}

impl Simulator {
    pub fn new(profile: SimulatorProfile) -> Result<Self, ProfileError> {
        profile.validate()?;
        Ok(Simulator {
            profile,
            answer_key: HashMap::new(),
        })
    }

    pub fn with_answer_key<'q>(mut self, queries: impl IntoIterator<Item = &'q Query>) -> Self {
        for q in queries {
            self.answer_key.insert(q.question.clone(), q.truth_index);
        }
        self
    }

    pub fn profile(&self) -> &SimulatorProfile {
        &self.profile
    }

    /// Question text and option count recovered from a rendered prompt.
    fn locate(prompt: &str) -> (Option<&str>, usize) {
        let Some(rest) = prompt.strip_prefix("Question: ") else {
            return (None, 4);
        };
        let Some(split) = rest.find("\nOptions:\n") else {
            return (None, 4);
        };
        let k = rest[split + "\nOptions:\n".len()..]
            .lines()
            .enumerate()
            .take_while(|(i, line)| *i < 26 && line.starts_with(&format!("{}. ", option_letter(*i))))
            .count();
        (Some(&rest[..split]), if k >= 2 { k } else { 4 })
    }

    fn format_confidence(&self, conf: f64) -> String {
        let pct = conf * 100.0;
        match self.profile.confidence_decimals {
            0 => format!("{}", pct.round() as i64),
            d => format!("{:.*}%", d as usize, pct),
        }
    }
}

impl Backend for Simulator {
    fn generate(&self, prompt: &str, _image_ref: Option<&str>, params: &GenerationParams) -> Result<String, BackendError> {
        if prompt.is_empty() {
            return Err(BackendError::InvalidRequest("empty prompt".into()));
        }
        let call_seed = if self.profile.deterministic || params.temperature == 0.0 {
            0
        } else {
            params.seed.unwrap_or(0)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(call_seed, &["simulator", &sha256_hex(prompt.as_bytes())]));

        if rng.random::<f64>() < self.profile.invalid_rate {
            return Ok(GARBLED[rng.random_range(0..GARBLED.len())].to_string());
        }

        let (question, k) = Self::locate(prompt);
        let truth = question
            .and_then(|q| self.answer_key.get(q).copied())
            .filter(|&t| t < k)
            .unwrap_or(0);
        let (acc, conf_mean) = self.profile.effective(prompt);
        let correct = rng.random::<f64>() < acc;
        let answer = if correct {
            truth
        } else {
            let other = rng.random_range(0..k - 1);
            if other >= truth {
                other + 1
            } else {
                other
            }
        };
        let jitter = self.profile.base_conf_spread * (2.0 * rng.random::<f64>() - 1.0);
        let conf = (conf_mean + jitter).clamp(0.0, 1.0);
        Ok(format!(
            "Answer: {}\nConfidence: {}",
            option_letter(answer),
            self.format_confidence(conf)
        ))
    }

    fn describe(&self) -> String {
        format!(
            "simulator(acc={}, conf={}±{}, invalid={}, effects={})",
            self.profile.base_accuracy,
            self.profile.base_conf_mean,
            self.profile.base_conf_spread,
            self.profile.invalid_rate,
            self.profile.feature_effects.len()
        )
    }
}
