//! Learning calibration guidance prompts (CGPs) with group-relative policy
//! optimization.
//!
//! A contextual softmax policy picks an auxiliary prompt for each
//! multiple-choice question. The prompt is appended to the downstream
//! model's input and the model's answer and verbalized confidence are scored
//! with an asymmetric log reward that punishes confident mistakes hardest.
//! GRPO turns those rewards into policy updates.
//!
//! Modules:
//! - [`data`]: queries, predictions, dataset loading and subsampling
//! - [`parsing`]: downstream prompt rendering and answer/confidence extraction
//! - [`reward`]: the calibration reward
//! - [`metrics`]: ECE, Brier, accuracy and slice reports
//! - [`backends`]: seeded simulator and OpenAI-compatible remote client
//! - [`policy`]: the trainable CGP generator
//! - [`grpo`]: rollout collection, advantages, clipped updates, training loop
//! - [`baselines`]: Verbalized, Fixed-PA, Consistency and Avg-Conf

pub mod backends;
pub mod baselines;
pub mod data;
pub mod grpo;
pub mod metrics;
pub mod parsing;
pub mod policy;
pub mod reward;
pub mod seed;

pub use data::{
    load_dataset, split_sample, Cgp, CgpSource, DataError, Dataset, InvalidReason, Prediction,
    Query, SplitLabel,
};
pub use metrics::{CalibrationReport, EvalRecord};
pub use parsing::{parse_prediction, render_downstream_prompt, InstructionTemplate};
pub use reward::{compute_reward, RewardConfig};
