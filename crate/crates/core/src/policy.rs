//! The CGP generator.
//!
//! [`SoftmaxPolicy`] is a contextual softmax over a library of CGP templates:
//! `logits = W · features(query)`. It exposes sampling, exact log-probs,
//! analytic score-function gradients and KL to a frozen reference, which is
//! everything GRPO needs. [`RemoteLlmPolicy`] asks a remote LLM for CGP text
//! and is inference-only.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Backend, BackendError, GenerationParams, RetryPolicy};
use crate::data::{Cgp, CgpSource, Query, CHARS_PER_TOKEN};
use crate::parsing::render_query_text;
use crate::seed::sha256_hex;

/// Logits are clipped to this magnitude before exponentiation.
pub const LOGIT_CLIP: f64 = 50.0;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// The fixed auxiliary prompt used by the Fixed-PA baseline.
pub const FIXED_PA_PROMPT: &str = "think step-by-step, do not be over-confident";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("prompt library needs at least two templates, got {0}")]
    LibraryTooSmall(usize),
    #[error("prompt library template {0} is a duplicate")]
    DuplicateTemplate(usize),
    #[error("action index {index} out of range for {n} templates")]
    Index { index: usize, n: usize },
    #[error("checkpoint {what} hash mismatch: checkpoint has {found}, configured {expected}")]
    Checksum {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("checkpoint is malformed: {0}")]
    Malformed(String),
    #[error("weights must be finite")]
    NonFinite,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptLibrary {
    templates: Vec<String>,
}

impl PromptLibrary {
    pub fn new(templates: Vec<String>) -> Result<Self, PolicyError> {
        if templates.len() < 2 {
            return Err(PolicyError::LibraryTooSmall(templates.len()));
        }
        for (i, t) in templates.iter().enumerate() {
            if templates[..i].contains(t) {
                return Err(PolicyError::DuplicateTemplate(i));
            }
        }
        Ok(PromptLibrary { templates })
    }

    /// Loads a JSON array of template strings.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        let text = fs::read_to_string(path)?;
        let templates: Vec<String> =
            serde_json::from_str(&text).map_err(|e| PolicyError::Malformed(format!("library: {e}")))?;
        Self::new(templates)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn hash(&self) -> String {
        let mut bytes = Vec::new();
        for t in &self.templates {
            bytes.extend_from_slice(&(t.len() as u64).to_le_bytes());
            bytes.extend_from_slice(t.as_bytes());
        }
        sha256_hex(&bytes)
    }

    /// Template `index` with `{question}` substituted, cut to the token budget.
    pub fn render(&self, index: usize, query: &Query, budget_tokens: usize) -> Cgp {
        let text = self.templates[index].replace("{question}", &query.question);
        Cgp::truncated(&text, CgpSource::Learned, budget_tokens)
    }
}

impl Default for PromptLibrary {
    fn default() -> Self {
        let step = "Think step-by-step about what the image shows and how each option relates to it before answering.";
        let eliminate = "Rule out the options that are inconsistent with the question \"{question}\" before choosing among the rest.";
        let rubric = "Use this confidence rubric: 90-100 only if the image leaves no doubt, 60-89 if fairly sure, 30-59 if two options remain plausible, below 30 if guessing.";
        PromptLibrary {
            templates: vec![
                String::new(),
                step.to_string(),
                FIXED_PA_PROMPT.to_string(),
                eliminate.to_string(),
                rubric.to_string(),
                format!("{step} {rubric}"),
                format!("{FIXED_PA_PROMPT}. {eliminate}"),
                format!("{eliminate} {rubric}"),
            ],
        }
    }
}

/// How query text is turned into a feature vector.
///
/// Layout: `[bias, length bucket?, option count?, keyword flags...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Question length thresholds in characters; empty disables the feature.
    pub length_buckets: Vec<usize>,
    pub option_count: bool,
    /// Whole-word (or whole-phrase) matches against question and options, case-insensitive.
    pub keywords: Vec<String>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            length_buckets: vec![40, 80, 160],
            option_count: true,
            keywords: ["ct", "mri", "x-ray", "ultrasound", "pet", "histology", "microscopy", "not"]
                .map(String::from)
                .to_vec(),
        }
    }
}

impl FeatureConfig {
    pub fn bias_only() -> Self {
        FeatureConfig {
            length_buckets: Vec::new(),
            option_count: false,
            keywords: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        1 + usize::from(!self.length_buckets.is_empty()) + usize::from(self.option_count) + self.keywords.len()
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("feature config serializes").as_bytes())
    }

    pub fn extract(&self, query: &Query) -> ContextFeatures {
        let mut v = Vec::with_capacity(self.dim());
        v.push(1.0);
        if !self.length_buckets.is_empty() {
            let len = query.question.chars().count();
            let bucket = self.length_buckets.iter().filter(|&&t| len > t).count();
            v.push(bucket as f64 / self.length_buckets.len() as f64);
        }
        if self.option_count {
            v.push(query.num_options() as f64 / 10.0);
        }
        if !self.keywords.is_empty() {
            let text = normalized_words(&format!("{} {}", query.question, query.options.join(" ")));
            for kw in &self.keywords {
                let needle = normalized_words(kw);
                v.push(if text.contains(&needle) { 1.0 } else { 0.0 });
            }
        }
        ContextFeatures(v)
    }
}

/// Lowercased words joined by single spaces, padded with a space on each side.
fn normalized_words(s: &str) -> String {
    let words: Vec<String> = s
        .split(|c: char| !(c.is_alphanumeric() || c == '-'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    format!(" {} ", words.join(" "))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextFeatures(pub Vec<f64>);

impl ContextFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Dense row-major matrix, used for weights and gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, PolicyError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(PolicyError::Malformed("ragged matrix".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols.max(1)).map(<[f64]>::to_vec).collect()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `(coeffs ⊗ features)`: row `i` is `coeffs[i] * features`.
    fn outer(coeffs: &[f64], features: &[f64]) -> Matrix {
        let mut m = Matrix::zeros(coeffs.len(), features.len());
        for (i, c) in coeffs.iter().enumerate() {
            for (j, f) in features.iter().enumerate() {
                m.data[i * features.len() + j] = c * f;
            }
        }
        m
    }
}

/// Numerically stable softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Log-softmax at temperature 1.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// How a generator picks a CGP at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Selection {
    Greedy,
    Sample { temperature: f64 },
}

/// Anything that can produce a CGP for a query at evaluation time.
pub trait CgpGenerator: Send + Sync {
    fn propose(&self, query: &Query, selection: Selection, seed: u64) -> Result<Cgp, PolicyError>;
    fn describe(&self) -> String;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledCgp {
    pub cgp: Cgp,
    /// Log-probability under the current policy at temperature 1.
    pub log_prob: f64,
    pub action: usize,
}

/// Contextual softmax over a [`PromptLibrary`].
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    library: PromptLibrary,
    features: FeatureConfig,
    weights: Matrix,
    reference: Matrix,
    cgp_budget_tokens: usize,
}

impl SoftmaxPolicy {
    /// All-zero weights: the uniform policy, which is also the reference.
    pub fn uniform(library: PromptLibrary, features: FeatureConfig, cgp_budget_tokens: usize) -> Self {
        let weights = Matrix::zeros(library.len(), features.dim());
        SoftmaxPolicy {
            reference: weights.clone(),
            weights,
            library,
            features,
            cgp_budget_tokens,
        }
    }

    pub fn with_weights(mut self, weights: Matrix) -> Result<Self, PolicyError> {
        if (weights.rows(), weights.cols()) != (self.library.len(), self.features.dim()) {
            return Err(PolicyError::Malformed("weight shape does not match library and features".into()));
        }
        if !weights.is_finite() {
            return Err(PolicyError::NonFinite);
        }
        self.weights = weights;
        Ok(self)
    }

    pub fn library(&self) -> &PromptLibrary {
        &self.library
    }

    pub fn feature_config(&self) -> &FeatureConfig {
        &self.features
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    pub fn reference_weights(&self) -> &Matrix {
        &self.reference
    }

    /// Snapshot the current weights as the KL reference.
    pub fn refresh_reference(&mut self) {
        self.reference = self.weights.clone();
    }

    pub fn n_templates(&self) -> usize {
        self.library.len()
    }

    pub fn features(&self, query: &Query) -> ContextFeatures {
        self.features.extract(query)
    }

    fn raw_logits(weights: &Matrix, features: &[f64]) -> Vec<f64> {
        (0..weights.rows())
            .map(|i| weights.row(i).iter().zip(features).map(|(w, f)| w * f).sum())
            .collect()
    }

    /// Clipped logits under the current weights.
    pub fn logits(&self, features: &ContextFeatures) -> Vec<f64> {
        Self::raw_logits(&self.weights, features.as_slice())
            .into_iter()
            .map(|z| z.clamp(-LOGIT_CLIP, LOGIT_CLIP))
            .collect()
    }

    fn reference_logits(&self, features: &ContextFeatures) -> Vec<f64> {
        Self::raw_logits(&self.reference, features.as_slice())
            .into_iter()
            .map(|z| z.clamp(-LOGIT_CLIP, LOGIT_CLIP))
            .collect()
    }

    pub fn probabilities(&self, features: &ContextFeatures, temperature: f64) -> Vec<f64> {
        softmax(&self.logits(features), temperature)
    }

    pub fn log_probs(&self, features: &ContextFeatures) -> Vec<f64> {
        log_softmax(&self.logits(features))
    }

    pub fn greedy_action(&self, features: &ContextFeatures) -> usize {
        let logits = self.logits(features);
        let mut best = 0;
        for (i, z) in logits.iter().enumerate() {
            if *z > logits[best] {
                best = i;
            }
        }
        best
    }

    /// Draws an action from `softmax(logits / temperature)` (argmax when the
    /// temperature is 0). The returned log-prob is always at temperature 1.
    pub fn sample_action(&self, features: &ContextFeatures, temperature: f64, seed: u64) -> (usize, f64) {
        let action = if temperature <= 0.0 {
            self.greedy_action(features)
        } else {
            let probs = self.probabilities(features, temperature);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        (action, self.log_probs(features)[action])
    }

    pub fn sample_cgp(&self, query: &Query, temperature: f64, seed: u64) -> SampledCgp {
        let (action, log_prob) = self.sample_action(&self.features(query), temperature, seed);
        SampledCgp {
            cgp: self.render(action, query),
            log_prob,
            action,
        }
    }

    pub fn render(&self, action: usize, query: &Query) -> Cgp {
        self.library.render(action, query, self.cgp_budget_tokens)
    }

    /// `log π(a|s)` and its gradient: row `i` is `(1{i=a} - π_i) · features`,
    /// zeroed for logits sitting on the clip boundary.
    pub fn log_prob_and_grad_features(&self, features: &ContextFeatures, action: usize) -> Result<(f64, Matrix), PolicyError> {
        let n = self.n_templates();
        if action >= n {
            return Err(PolicyError::Index { index: action, n });
        }
        let raw = Self::raw_logits(&self.weights, features.as_slice());
        let clipped: Vec<f64> = raw.iter().map(|z| z.clamp(-LOGIT_CLIP, LOGIT_CLIP)).collect();
        let logp = log_softmax(&clipped);
        let coeffs: Vec<f64> = (0..n)
            .map(|i| {
                let d = if i == action { 1.0 } else { 0.0 } - logp[i].exp();
                if raw[i].abs() < LOGIT_CLIP {
                    d
                } else {
                    0.0
                }
            })
            .collect();
        Ok((logp[action], Matrix::outer(&coeffs, features.as_slice())))
    }

    pub fn log_prob_and_grad(&self, query: &Query, action: usize) -> Result<(f64, Matrix), PolicyError> {
        self.log_prob_and_grad_features(&self.features(query), action)
    }

    /// `KL(current ‖ reference)` over templates, given features.
    pub fn kl_features(&self, features: &ContextFeatures) -> f64 {
        let lp = self.log_probs(features);
        let lq = log_softmax(&self.reference_logits(features));
        let kl: f64 = lp.iter().zip(&lq).map(|(p, q)| p.exp() * (p - q)).sum();
        kl.max(0.0)
    }

    pub fn kl_to_reference(&self, query: &Query) -> f64 {
        self.kl_features(&self.features(query))
    }

    /// Gradient of `KL(current ‖ reference)` with respect to the weights.
    /// `∂KL/∂z_j = p_j (log p_j − log q_j − KL)`.
    pub fn kl_grad_features(&self, features: &ContextFeatures) -> Matrix {
        let raw = Self::raw_logits(&self.weights, features.as_slice());
        let lp = self.log_probs(features);
        let lq = log_softmax(&self.reference_logits(features));
        let kl: f64 = lp.iter().zip(&lq).map(|(p, q)| p.exp() * (p - q)).sum();
        let coeffs: Vec<f64> = (0..lp.len())
            .map(|j| {
                if raw[j].abs() < LOGIT_CLIP {
                    lp[j].exp() * (lp[j] - lq[j] - kl)
                } else {
                    0.0
                }
            })
            .collect();
        Matrix::outer(&coeffs, features.as_slice())
    }

    pub fn to_checkpoint(&self) -> PolicyCheckpoint {
        PolicyCheckpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            library_hash: self.library.hash(),
            feature_config_hash: self.features.hash(),
            n_templates: self.n_templates(),
            feature_dim: self.features.dim(),
            log_prob_temperature: 1.0,
            weights: self.weights.to_rows(),
            reference_weights: self.reference.to_rows(),
        }
    }

    /// Rebuilds a policy, refusing checkpoints trained against another library or feature layout.
    pub fn from_checkpoint(
        ckpt: &PolicyCheckpoint,
        library: PromptLibrary,
        features: FeatureConfig,
        cgp_budget_tokens: usize,
    ) -> Result<Self, PolicyError> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(PolicyError::Malformed(format!("unsupported format version {}", ckpt.format_version)));
        }
        let lib_hash = library.hash();
        if ckpt.library_hash != lib_hash {
            return Err(PolicyError::Checksum {
                what: "library",
                expected: lib_hash,
                found: ckpt.library_hash.clone(),
            });
        }
        let feat_hash = features.hash();
        if ckpt.feature_config_hash != feat_hash {
            return Err(PolicyError::Checksum {
                what: "feature config",
                expected: feat_hash,
                found: ckpt.feature_config_hash.clone(),
            });
        }
        let weights = Matrix::from_rows(ckpt.weights.clone())?;
        let reference = Matrix::from_rows(ckpt.reference_weights.clone())?;
        let mut policy = SoftmaxPolicy::uniform(library, features, cgp_budget_tokens).with_weights(reference)?;
        policy.refresh_reference();
        policy.with_weights(weights)
    }
}

impl CgpGenerator for SoftmaxPolicy {
    fn propose(&self, query: &Query, selection: Selection, seed: u64) -> Result<Cgp, PolicyError> {
        let temperature = match selection {
            Selection::Greedy => 0.0,
            Selection::Sample { temperature } => temperature,
        };
        Ok(self.sample_cgp(query, temperature, seed).cgp)
    }

    fn describe(&self) -> String {
        format!("softmax policy ({} templates, {} features)", self.n_templates(), self.features.dim())
    }
}

/// Serialized policy state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub format_version: u32,
    pub library_hash: String,
    pub feature_config_hash: String,
    pub n_templates: usize,
    pub feature_dim: usize,
    /// Temperature at which training log-probs (and ratios) were computed.
    pub log_prob_temperature: f64,
    pub weights: Vec<Vec<f64>>,
    pub reference_weights: Vec<Vec<f64>>,
}

impl PolicyCheckpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PolicyError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| PolicyError::Malformed(e.to_string()))
    }
}

/// Frozen LLM that writes CGP text. No gradients.
pub struct RemoteLlmPolicy<B> {
    backend: B,
    pub instruction: String,
    pub params: GenerationParams,
    pub retry: RetryPolicy,
    pub max_prompt_tokens: usize,
}

pub const DEFAULT_GENERATOR_INSTRUCTION: &str = "You write a short guidance prompt for another model that must answer the \
following medical multiple-choice question and then state its confidence out of 100. The guidance should help it \
reason about this specific question and express confidence that matches how likely it is to be right. Reply with \
the guidance prompt only.";

impl<B: Backend> RemoteLlmPolicy<B> {
    pub fn new(backend: B, params: GenerationParams) -> Self {
        RemoteLlmPolicy {
            backend,
            instruction: DEFAULT_GENERATOR_INSTRUCTION.to_string(),
            params,
            retry: RetryPolicy::default(),
            max_prompt_tokens: 512,
        }
    }

    /// Generator input: instruction plus question and options, cut to the prompt budget.
    pub fn generator_prompt(&self, query: &Query) -> String {
        let full = format!("{}\n\n{}", self.instruction, render_query_text(query));
        let budget = self.max_prompt_tokens * CHARS_PER_TOKEN;
        match full.char_indices().nth(budget) {
            Some((cut, _)) => full[..cut].to_string(),
            None => full,
        }
    }
}

impl<B: Backend> CgpGenerator for RemoteLlmPolicy<B> {
    fn propose(&self, query: &Query, selection: Selection, seed: u64) -> Result<Cgp, PolicyError> {
        let mut params = self.params.with_seed(seed);
        if selection == Selection::Greedy {
            params.temperature = 0.0;
        } else if let Selection::Sample { temperature } = selection {
            params.temperature = temperature;
        }
        let prompt = self.generator_prompt(query);
        // the generator never sees the image
        let text = self.retry.run(|| self.backend.generate(&prompt, None, &params))?;
        Ok(Cgp::truncated(text.trim(), CgpSource::Learned, self.params.max_new_tokens))
    }

    fn describe(&self) -> String {
        format!("remote CGP generator {}", self.backend.describe())
    }
}
