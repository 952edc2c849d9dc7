//! Run configuration, read from a TOML document.

use std::fs;
use std::path::{Path, PathBuf};

use cgpo_core::backends::{FeatureEffect, GenerationParams, RemoteConfig, RetryPolicy, SimulatorProfile};
use cgpo_core::baselines::{BaselineKind, BaselineSpec, DEFAULT_COT_PREAMBLE};
use cgpo_core::grpo::GrpoConfig;
use cgpo_core::metrics::MetricSettings;
use cgpo_core::policy::{FeatureConfig, DEFAULT_GENERATOR_INSTRUCTION, FIXED_PA_PROMPT};
use cgpo_core::{InstructionTemplate, RewardConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds data subsampling, rollouts and evaluation.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub generation: GenerationConfig,
    pub template: InstructionTemplate,
    pub retry: RetryPolicy,
    pub reward: RewardConfig,
    pub metrics: MetricSettings,
    pub policy: PolicyConfig,
    pub grpo: GrpoConfig,
    pub baselines: BaselineConfig,
    pub backend: BackendConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            generation: GenerationConfig::default(),
            template: InstructionTemplate::default(),
            retry: RetryPolicy::default(),
            reward: RewardConfig::default(),
            metrics: MetricSettings::default(),
            policy: PolicyConfig::default(),
            grpo: GrpoConfig::default(),
            baselines: BaselineConfig::default(),
            backend: BackendConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub train_size: usize,
    pub val_size: usize,
    /// Subsample the test split; unset uses every record.
    pub test_size: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_path: None,
            val_path: None,
            test_path: None,
            train_size: 5000,
            val_size: 1000,
            test_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub max_new_tokens: usize,
    /// Prompt budget for an LLM CGP generator.
    pub max_prompt_tokens: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        let p = GenerationParams::default();
        GenerationConfig {
            temperature: p.temperature,
            top_k: p.top_k,
            max_new_tokens: p.max_new_tokens,
            max_prompt_tokens: 512,
        }
    }
}

impl GenerationConfig {
    pub fn params(&self) -> GenerationParams {
        GenerationParams {
            temperature: self.temperature,
            top_k: self.top_k,
            max_new_tokens: self.max_new_tokens,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// JSON array of templates; unset uses the built-in library.
    pub library_path: Option<PathBuf>,
    pub features: FeatureConfig,
    pub cgp_budget_tokens: usize,
    pub generator: GeneratorConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            library_path: None,
            features: FeatureConfig::default(),
            cgp_budget_tokens: 256,
            generator: GeneratorConfig::Softmax,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorConfig {
    /// Trainable softmax over the template library.
    #[default]
    Softmax,
    /// Frozen chat model writing CGPs; evaluation only.
    RemoteLlm {
        endpoint: RemoteConfig,
        #[serde(default = "default_instruction")]
        instruction: String,
    },
}

fn default_instruction() -> String {
    DEFAULT_GENERATOR_INSTRUCTION.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub n_samples: usize,
    pub fixed_prompt: String,
    /// Chain-of-thought line for the sampling baselines; empty disables it.
    pub cot_preamble: String,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            n_samples: 21,
            fixed_prompt: FIXED_PA_PROMPT.to_string(),
            cot_preamble: DEFAULT_COT_PREAMBLE.to_string(),
        }
    }
}

impl BaselineConfig {
    pub fn spec(&self, kind: BaselineKind) -> BaselineSpec {
        BaselineSpec {
            kind,
            n_samples: self.n_samples,
            fixed_prompt: self.fixed_prompt.clone(),
            cot_preamble: kind.is_sampling() && !self.cot_preamble.trim().is_empty(),
            cot_text: self.cot_preamble.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Simulator {
        /// TOML file holding a profile; replaces the inline one when set.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        profile_path: Option<PathBuf>,
        #[serde(default)]
        profile: SimulatorProfile,
    },
    Remote(RemoteConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Simulator {
            profile_path: None,
            profile: demo_profile(),
        }
    }
}

/// An over-confident simulated model whose behaviour reacts to phrases in
/// the built-in template library.
pub fn demo_profile() -> SimulatorProfile {
    let fx = |phrase: &str, acc: f64, conf: f64| FeatureEffect {
        trigger_phrase: phrase.into(),
        accuracy_delta: acc,
        conf_delta: conf,
    };
    SimulatorProfile {
        base_accuracy: 0.45,
        base_conf_mean: 0.85,
        base_conf_spread: 0.1,
        feature_effects: vec![
            fx("step-by-step", 0.05, 0.0),
            fx("Rule out the options", 0.1, 0.0),
            fx("do not be over-confident", 0.0, -0.2),
            fx("confidence rubric", 0.0, -0.25),
        ],
        invalid_rate: 0.02,
        deterministic: false,
        confidence_decimals: 0,
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn user(msg: impl Into<String>) -> CliError {
    CliError::User(msg.into())
}

impl RunConfig {
    /// Reads, resolves relative paths against the config's directory and validates.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| user(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| user(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.load_profile_file()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| user(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.data.train_path, &mut self.data.val_path, &mut self.data.test_path, &mut self.policy.library_path]
            .into_iter()
            .flatten()
        {
            *p = resolve(base, p);
        }
        if let BackendConfig::Simulator { profile_path: Some(p), .. } = &mut self.backend {
            *p = resolve(base, p);
        }
        self.output_dir = resolve(base, &self.output_dir);
    }

    fn load_profile_file(&mut self) -> Result<(), CliError> {
        if let BackendConfig::Simulator { profile_path: Some(p), profile } = &mut self.backend {
            let text = fs::read_to_string(&*p).map_err(|e| user(format!("backend.profile_path {}: {e}", p.display())))?;
            *profile = toml::from_str(&text).map_err(|e| user(format!("backend.profile_path {}: {e}", p.display())))?;
        }
        Ok(())
    }

    /// Checks every field and that referenced files exist.
    pub fn validate(&self) -> Result<(), CliError> {
        let files = [
            ("data.train_path", &self.data.train_path),
            ("data.val_path", &self.data.val_path),
            ("data.test_path", &self.data.test_path),
            ("policy.library_path", &self.policy.library_path),
        ];
        for (field, path) in files {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(user(format!("{field}: file not found: {}", p.display())));
                }
            }
        }
        if self.grpo.seed != 0 && self.grpo.seed != self.seed {
            return Err(user("grpo.seed: set the seed once at the top level"));
        }
        self.grpo.validate().map_err(|e| user(format!("grpo: {e}")))?;
        self.generation.params().validate().map_err(|e| user(format!("generation: {e}")))?;
        if self.generation.max_prompt_tokens == 0 {
            return Err(user("generation.max_prompt_tokens must be >= 1"));
        }
        self.template.validate().map_err(|e| user(format!("template: {e}")))?;
        self.reward.validate().map_err(|e| user(format!("reward: {e}")))?;
        if self.metrics.n_bins == 0 {
            return Err(user("metrics.n_bins must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.metrics.conf_threshold) {
            return Err(user("metrics.conf_threshold must be in [0, 1]"));
        }
        if self.baselines.n_samples == 0 {
            return Err(user("baselines.n_samples must be >= 1"));
        }
        if self.policy.cgp_budget_tokens == 0 {
            return Err(user("policy.cgp_budget_tokens must be >= 1"));
        }
        match &self.backend {
            BackendConfig::Simulator { profile, .. } => profile.validate().map_err(|e| user(format!("backend.profile: {e}")))?,
            BackendConfig::Remote(r) if r.model.is_empty() => return Err(user("backend.model must be set for a remote backend")),
            BackendConfig::Remote(_) => {}
        }
        if let GeneratorConfig::RemoteLlm { endpoint, .. } = &self.policy.generator {
            if endpoint.model.is_empty() {
                return Err(user("policy.generator.endpoint.model must be set"));
            }
        }
        Ok(())
    }

    /// Rollout and evaluation seed, with the top-level seed taking effect.
    pub fn grpo_config(&self) -> GrpoConfig {
        GrpoConfig {
            seed: self.seed,
            ..self.grpo.clone()
        }
    }
}

/// The default configuration as a commented TOML document.
pub fn commented_default() -> String {
    let d = RunConfig::default();
    let g = &d.grpo;
    format!(
        r#"# Run configuration. Relative paths resolve against this file's directory.
# API tokens are never read from here: remote backends name an environment
# variable in `api_key_env`.

# Seeds data subsampling, rollouts and evaluation.
seed = {seed}
output_dir = "runs/default"

[data]
# JSON Lines files: {{"id", "question", "options", "answer", "image"?}} per line.
# train_path = "data/train.jsonl"
# val_path = "data/val.jsonl"
# test_path = "data/test.jsonl"
train_size = {train_size}
val_size = {val_size}
# test_size = 2000       # unset evaluates every test record

[generation]
# Sampling settings for the downstream model and any LLM CGP generator.
temperature = {temperature:?}
top_k = {top_k}
max_new_tokens = {max_new_tokens}
max_prompt_tokens = {max_prompt_tokens}

[template]
preamble = {preamble:?}
answer_directive = {answer:?}
confidence_directive = {confidence:?}

[retry]
# Exponential backoff for transport errors, timeouts, 408/429 and 5xx.
max_retries = {max_retries}
base_delay_ms = {base_delay_ms}
max_delay_ms = {max_delay_ms}

[reward]
# correct: ln(min(1, max(p, epsilon)))
# wrong:   ln(min(1, max(1 - p, epsilon))) - incorrect_offset
# invalid: ln(epsilon_penalty)
epsilon = {epsilon:e}
epsilon_penalty = {epsilon_penalty:e}
incorrect_offset = {offset:?}

[metrics]
n_bins = {n_bins}
conf_threshold = {conf_threshold:?}
# Queries that could not be sent at all, counted as wrong in accuracy_all.
extra_incorrect = {extra_incorrect}

[policy]
# library_path = "templates.json"   # JSON array of strings; "{{question}}" is substituted
cgp_budget_tokens = {cgp_budget}

[policy.features]
length_buckets = {length_buckets:?}
option_count = {option_count}
keywords = {keywords:?}

[policy.generator]
kind = "softmax"
# An inference-only chat model instead (eval only):
# kind = "remote_llm"
# endpoint = {{ base_url = "http://localhost:8001/v1", model = "generator", api_key_env = "OPENAI_API_KEY" }}

[grpo]
group_size = {group_size}
beta = {beta:?}
clip_epsilon = {clip:?}
disable_clip = false
# A 1.5B-parameter LLM generator was trained at 1e-6; the softmax policy needs a larger step.
learning_rate = {lr:?}
inner_iterations = {mu}
batch_queries = {batch}
max_steps = {max_steps}
eval_every = {eval_every}
normalize_std = false
sampling_temperature = {sampling_temperature:?}
# reference_refresh_every = 50   # unset keeps the initial policy as the KL reference
optimizer = "sgd"                # or "adam_w"
weight_decay = {weight_decay:?}
adam_beta1 = {b1:?}
adam_beta2 = {b2:?}
adam_eps = {eps:e}
max_group_retries = {group_retries}
max_in_flight = {in_flight}

[baselines]
n_samples = {n_samples}
fixed_prompt = {fixed_prompt:?}
cot_preamble = {cot:?}

[backend]
kind = "simulator"
# profile_path = "profile.toml"   # replaces the inline profile below
# For a served model instead:
# kind = "remote"
# base_url = "http://localhost:8000/v1"
# model = "Qwen2-VL-2B-Instruct"
# api_key_env = "OPENAI_API_KEY"
# timeout_secs = 120
# max_in_flight = 8

[backend.profile]
base_accuracy = {base_accuracy:?}
base_conf_mean = {base_conf_mean:?}
base_conf_spread = {base_conf_spread:?}
invalid_rate = {invalid_rate:?}
deterministic = false
confidence_decimals = 0
{effects}"#,
        seed = d.seed,
        train_size = d.data.train_size,
        val_size = d.data.val_size,
        temperature = d.generation.temperature,
        top_k = d.generation.top_k,
        max_new_tokens = d.generation.max_new_tokens,
        max_prompt_tokens = d.generation.max_prompt_tokens,
        preamble = d.template.preamble,
        answer = d.template.answer_directive,
        confidence = d.template.confidence_directive,
        max_retries = d.retry.max_retries,
        base_delay_ms = d.retry.base_delay_ms,
        max_delay_ms = d.retry.max_delay_ms,
        epsilon = d.reward.epsilon,
        epsilon_penalty = d.reward.epsilon_penalty,
        offset = d.reward.incorrect_offset,
        n_bins = d.metrics.n_bins,
        conf_threshold = d.metrics.conf_threshold,
        extra_incorrect = d.metrics.extra_incorrect,
        cgp_budget = d.policy.cgp_budget_tokens,
        length_buckets = d.policy.features.length_buckets,
        option_count = d.policy.features.option_count,
        keywords = d.policy.features.keywords,
        group_size = g.group_size,
        beta = g.beta,
        clip = g.clip_epsilon,
        lr = g.learning_rate,
        mu = g.inner_iterations,
        batch = g.batch_queries,
        max_steps = g.max_steps,
        eval_every = g.eval_every,
        sampling_temperature = g.sampling_temperature,
        weight_decay = g.weight_decay,
        b1 = g.adam_beta1,
        b2 = g.adam_beta2,
        eps = g.adam_eps,
        group_retries = g.max_group_retries,
        in_flight = g.max_in_flight,
        n_samples = d.baselines.n_samples,
        fixed_prompt = d.baselines.fixed_prompt,
        cot = d.baselines.cot_preamble,
        base_accuracy = demo_profile().base_accuracy,
        base_conf_mean = demo_profile().base_conf_mean,
        base_conf_spread = demo_profile().base_conf_spread,
        invalid_rate = demo_profile().invalid_rate,
        effects = demo_profile()
            .feature_effects
            .iter()
            .map(|fx| format!(
                "\n[[backend.profile.feature_effects]]\ntrigger_phrase = {:?}\naccuracy_delta = {:?}\nconf_delta = {:?}\n",
                fx.trigger_phrase, fx.accuracy_delta, fx.conf_delta
            ))
            .collect::<String>(),
    )
}
