//! Group-relative policy optimization for [`SoftmaxPolicy`].
//!
//! For every query in a batch the policy samples `G` CGPs, the downstream
//! model answers once per CGP and each answer is scored with the calibration
//! reward. Advantages are rewards minus the group mean (no std scaling by
//! default). Each collected batch is then optimized for `μ` inner iterations
//! of the clipped surrogate
//!
//! ```text
//! J = mean_i min(ρ_i a_i, clip(ρ_i, 1-ε, 1+ε) a_i) - β · mean_i KL(π ‖ π_ref)
//! ρ_i = exp(log π(a_i|s_i) - log π_old(a_i|s_i))
//! ```
//!
//! by gradient ascent. There is no value function.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Downstream, GenerationParams};
use crate::data::{Cgp, Dataset, Prediction, Query};
use crate::metrics::{slice_report, CalibrationReport, EvalRecord, MetricSettings, MetricsError};
use crate::policy::{CgpGenerator, ContextFeatures, Matrix, PolicyError, Selection, SoftmaxPolicy};
use crate::reward::{compute_reward, RewardConfig};
use crate::seed::derive_seed;

/// Learning rate the original recipe used for a 1.5B-parameter LLM generator.
pub const LLM_LEARNING_RATE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("invalid GRPO config: {0}")]
    Config(String),
    #[error("need at least 2 rewards per group, got {0}")]
    Size(usize),
    #[error("no rollout groups to optimize")]
    NoGroups,
    #[error("training diverged: {0}")]
    Divergence(Box<DivergenceReport>),
    #[error("backend failed after {attempts} group attempts: {source}")]
    Backend {
        attempts: usize,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

/// Snapshot written when the loss or weights stop being finite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub step: usize,
    pub iteration: usize,
    pub loss: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub weights: Vec<Vec<f64>>,
}

impl std::fmt::Display for DivergenceReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "non-finite loss {} at step {} iteration {} (surrogate {}, kl {})",
            self.loss, self.step, self.iteration, self.surrogate, self.kl
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient ascent with optional decoupled weight decay.
    Sgd,
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub beta: f64,
    pub clip_epsilon: f64,
    /// Turns the ratio clip off entirely.
    pub disable_clip: bool,
    pub learning_rate: f64,
    pub inner_iterations: usize,
    pub batch_queries: usize,
    pub max_steps: usize,
    /// Evaluate on the validation split every this many steps; 0 disables.
    pub eval_every: usize,
    pub seed: u64,
    /// Divide centred rewards by their std (ablation only).
    pub normalize_std: bool,
    /// Temperature for sampling CGPs during rollouts. At 1 the samples come
    /// from the same distribution the ratios are computed under.
    pub sampling_temperature: f64,
    /// Snapshot the KL reference every this many steps; `None` keeps the initial policy.
    pub reference_refresh_every: Option<usize>,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Re-collection attempts for a group whose backend calls failed.
    pub max_group_retries: usize,
    /// Upper bound on concurrent backend calls.
    pub max_in_flight: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            beta: 0.04,
            clip_epsilon: 0.2,
            disable_clip: false,
            learning_rate: 1e-2,
            inner_iterations: 4,
            batch_queries: 8,
            max_steps: 200,
            eval_every: 0,
            seed: 0,
            normalize_std: false,
            sampling_temperature: 1.0,
            reference_refresh_every: None,
            optimizer: OptimizerKind::Sgd,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_group_retries: 2,
            max_in_flight: 8,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let fail = |m: &str| Err(GrpoError::Config(m.to_string()));
        if self.group_size < 2 {
            return fail("group_size must be >= 2");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return fail("clip_epsilon must be in (0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be > 0");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail("beta must be >= 0");
        }
        if self.inner_iterations == 0 {
            return fail("inner_iterations must be >= 1");
        }
        if self.batch_queries == 0 {
            return fail("batch_queries must be >= 1");
        }
        if !(self.sampling_temperature >= 0.0 && self.sampling_temperature.is_finite()) {
            return fail("sampling_temperature must be >= 0");
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be >= 0");
        }
        if self.reference_refresh_every == Some(0) {
            return fail("reference_refresh_every must be >= 1 when set");
        }
        if self.max_in_flight == 0 {
            return fail("max_in_flight must be >= 1");
        }
        Ok(())
    }

    fn clip_range(&self) -> Option<(f64, f64)> {
        (!self.disable_clip).then_some((1.0 - self.clip_epsilon, 1.0 + self.clip_epsilon))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSample {
    pub action: usize,
    pub cgp: Cgp,
    pub log_prob_old: f64,
    pub prediction: Prediction,
    pub reward: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub query_id: String,
    pub features: ContextFeatures,
    pub samples: Vec<RolloutSample>,
}

impl RolloutGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.reward).collect()
    }
}

/// Mean-centred advantages, optionally scaled by the population std (floored at 1e-8).
pub fn compute_advantages(rewards: &[f64], normalize_std: bool) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::Size(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let centred: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    if !normalize_std {
        return Ok(centred);
    }
    let std = (centred.iter().map(|a| a * a).sum::<f64>() / n).sqrt().max(1e-8);
    Ok(centred.into_iter().map(|a| a / std).collect())
}

/// Samples `G` CGPs for one query, gets one downstream answer per CGP and
/// scores it. Draws are keyed by `group_seed` so collection order does not
/// matter. A backend failure discards the whole group and re-collects it with
/// fresh seeds; unparseable answers are kept with the format penalty.
#[allow(clippy::too_many_arguments)]
pub fn collect_group(
    policy: &SoftmaxPolicy,
    query: &Query,
    downstream: &Downstream<'_>,
    params: &GenerationParams,
    reward_cfg: &RewardConfig,
    cfg: &GrpoConfig,
    group_seed: u64,
) -> Result<RolloutGroup, GrpoError> {
    let features = policy.features(query);
    let mut attempt = 0;
    loop {
        let attempt_seed = derive_seed(group_seed, &[attempt.to_string()]);
        let result: Result<Vec<RolloutSample>, BackendError> = (0..cfg.group_size)
            .map(|j| {
                let j = j.to_string();
                let (action, log_prob_old) = policy.sample_action(
                    &features,
                    cfg.sampling_temperature,
                    derive_seed(attempt_seed, &["policy", &j]),
                );
                let cgp = policy.render(action, query);
                let call_params = params.with_seed(derive_seed(attempt_seed, &["downstream", &j]));
                let prediction = downstream.answer_query(query, Some(&cgp), &call_params)?;
                let reward = compute_reward(&prediction, query.truth_index, reward_cfg);
                Ok(RolloutSample {
                    action,
                    cgp,
                    log_prob_old,
                    prediction,
                    reward,
                    advantage: 0.0,
                })
            })
            .collect();
        match result {
            Ok(mut samples) => {
                let rewards: Vec<f64> = samples.iter().map(|s| s.reward).collect();
                for (s, a) in samples.iter_mut().zip(compute_advantages(&rewards, cfg.normalize_std)?) {
                    s.advantage = a;
                }
                return Ok(RolloutGroup {
                    query_id: query.id.clone(),
                    features,
                    samples,
                });
            }
            Err(e) if attempt < cfg.max_group_retries => {
                log::warn!("group for {} failed ({e}); re-collecting", query.id);
                attempt += 1;
            }
            Err(e) => {
                return Err(GrpoError::Backend {
                    attempts: attempt + 1,
                    source: e,
                })
            }
        }
    }
}

/// Gradient-ascent optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Option<Matrix>,
    v: Option<Matrix>,
}

impl Optimizer {
    pub fn from_config(cfg: &GrpoConfig) -> Self {
        Optimizer {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: None,
            v: None,
        }
    }

    /// Moves `weights` along `grad` (an ascent direction).
    pub fn ascend(&mut self, weights: &mut Matrix, grad: &Matrix) {
        let decay = 1.0 - self.lr * self.weight_decay;
        match self.kind {
            OptimizerKind::Sgd => {
                if self.weight_decay != 0.0 {
                    weights.as_mut_slice().iter_mut().for_each(|w| *w *= decay);
                }
                weights.add_scaled(grad, self.lr);
            }
            OptimizerKind::AdamW => {
                self.t += 1;
                let m = self.m.get_or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
                let v = self.v.get_or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
                let bc1 = 1.0 - self.beta1.powi(self.t);
                let bc2 = 1.0 - self.beta2.powi(self.t);
                for (((w, g), m), v) in weights
                    .as_mut_slice()
                    .iter_mut()
                    .zip(grad.as_slice())
                    .zip(m.as_mut_slice())
                    .zip(v.as_mut_slice())
                {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let step = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                    *w = *w * decay + self.lr * step;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub loss: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub mean_reward: f64,
    /// KL to the reference before this step's first update.
    pub mean_kl: f64,
    /// Mean over inner iterations.
    pub clip_fraction: f64,
    /// Loss (negated objective) before this step's first update.
    pub loss: f64,
    pub iterations: Vec<IterationStats>,
}

/// Objective value and ascent direction at the current weights.
pub fn surrogate_and_grad(
    policy: &SoftmaxPolicy,
    groups: &[RolloutGroup],
    cfg: &GrpoConfig,
) -> Result<(IterationStats, Matrix), GrpoError> {
    let n_samples: usize = groups.iter().map(|g| g.samples.len()).sum();
    if n_samples == 0 {
        return Err(GrpoError::NoGroups);
    }
    let n = n_samples as f64;
    let clip = cfg.clip_range();
    let w = policy.weights();
    let mut grad = Matrix::zeros(w.rows(), w.cols());
    let (mut surrogate, mut kl, mut clipped) = (0.0, 0.0, 0usize);

    for group in groups {
        for s in &group.samples {
            let (logp, score) = policy.log_prob_and_grad_features(&group.features, s.action)?;
            let ratio = (logp - s.log_prob_old).exp();
            let a = s.advantage;
            let unclipped = ratio * a;
            let clipped_term = match clip {
                Some((lo, hi)) => ratio.clamp(lo, hi) * a,
                None => unclipped,
            };
            if clipped_term < unclipped {
                clipped += 1;
                surrogate += clipped_term;
            } else {
                surrogate += unclipped;
                grad.add_scaled(&score, unclipped / n);
            }
        }
        if cfg.beta != 0.0 {
            let g = group.samples.len() as f64;
            kl += g * policy.kl_features(&group.features);
            grad.add_scaled(&policy.kl_grad_features(&group.features), -cfg.beta * g / n);
        }
    }
    let surrogate = surrogate / n;
    let kl = if cfg.beta != 0.0 {
        kl / n
    } else {
        groups
            .iter()
            .map(|g| g.samples.len() as f64 * policy.kl_features(&g.features))
            .sum::<f64>()
            / n
    };
    let stats = IterationStats {
        loss: -(surrogate - cfg.beta * kl),
        surrogate,
        kl,
        clip_fraction: clipped as f64 / n,
    };
    Ok((stats, grad))
}

/// Runs `μ` inner iterations of clipped-surrogate ascent on one batch.
pub fn grpo_step(
    policy: &mut SoftmaxPolicy,
    groups: &[RolloutGroup],
    cfg: &GrpoConfig,
    optimizer: &mut Optimizer,
    step: usize,
) -> Result<UpdateStats, GrpoError> {
    if groups.is_empty() {
        return Err(GrpoError::NoGroups);
    }
    let mut iterations = Vec::with_capacity(cfg.inner_iterations);
    for it in 0..cfg.inner_iterations {
        let (stats, grad) = surrogate_and_grad(policy, groups, cfg)?;
        if !stats.loss.is_finite() || !grad.is_finite() {
            return Err(divergence(policy, step, it, &stats));
        }
        optimizer.ascend(policy.weights_mut(), &grad);
        if !policy.weights().is_finite() {
            return Err(divergence(policy, step, it, &stats));
        }
        iterations.push(stats);
    }
    let n: usize = groups.iter().map(|g| g.samples.len()).sum();
    let mean_reward = groups.iter().flat_map(|g| &g.samples).map(|s| s.reward).sum::<f64>() / n as f64;
    Ok(UpdateStats {
        mean_reward,
        mean_kl: iterations[0].kl,
        clip_fraction: iterations.iter().map(|i| i.clip_fraction).sum::<f64>() / iterations.len() as f64,
        loss: iterations[0].loss,
        iterations,
    })
}

fn divergence(policy: &SoftmaxPolicy, step: usize, iteration: usize, stats: &IterationStats) -> GrpoError {
    GrpoError::Divergence(Box::new(DivergenceReport {
        step,
        iteration,
        loss: stats.loss,
        surrogate: stats.surrogate,
        kl: stats.kl,
        weights: policy.weights().to_rows(),
    }))
}

/// One row of the reward curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub loss: f64,
}

pub const REWARD_CURVE_HEADER: &str = "step,mean_reward,mean_kl,clip_fraction";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.step, self.mean_reward, self.mean_kl, self.clip_fraction)
    }
}

#[derive(Debug, Clone)]
pub struct TrainingArtifacts {
    pub policy: SoftmaxPolicy,
    pub reward_curve: Vec<StepRecord>,
    pub eval_reports: Vec<(usize, CalibrationReport)>,
}

/// Streaming hooks so callers can persist progress as it happens.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord, _policy: &SoftmaxPolicy) {}
    fn on_eval(&mut self, _step: usize, _report: &CalibrationReport) {}
}

impl TrainObserver for () {}

/// Failure during training, carrying whatever was produced before it.
#[derive(Debug, Error)]
#[error("{source}")]
pub struct TrainError {
    #[source]
    pub source: GrpoError,
    pub partial: Box<TrainingArtifacts>,
}

pub struct TrainingSetup<'a> {
    pub train: &'a Dataset,
    pub val: Option<&'a Dataset>,
    pub downstream: Downstream<'a>,
    pub params: GenerationParams,
    pub reward: RewardConfig,
    pub grpo: GrpoConfig,
    pub metrics: MetricSettings,
}

pub(crate) fn thread_pool(max_in_flight: usize) -> Result<rayon::ThreadPool, GrpoError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(max_in_flight.max(1))
        .build()
        .map_err(|e| GrpoError::ThreadPool(e.to_string()))
}

/// Query order for one pass over the training set.
fn epoch_order(train: &Dataset, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.sort_by(|&a, &b| train.records[a].id.cmp(&train.records[b].id));
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(derive_seed(
        seed,
        &["epoch", &epoch.to_string()],
    ));
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
    idx
}

/// Full training loop. Reproducible from `(config, seed)` on the simulator.
pub fn train(
    mut policy: SoftmaxPolicy,
    setup: &TrainingSetup<'_>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainingArtifacts, TrainError> {
    let cfg = &setup.grpo;
    let mut artifacts = TrainingArtifacts {
        policy: policy.clone(),
        reward_curve: Vec::new(),
        eval_reports: Vec::new(),
    };
    macro_rules! bail {
        ($e:expr, $policy:expr) => {{
            artifacts.policy = $policy.clone();
            return Err(TrainError {
                source: $e,
                partial: Box::new(artifacts),
            });
        }};
    }
    if let Err(e) = cfg.validate() {
        bail!(e, policy);
    }
    if setup.train.is_empty() && cfg.max_steps > 0 {
        bail!(GrpoError::Config("training split is empty".into()), policy);
    }
    let pool = match thread_pool(cfg.max_in_flight) {
        Ok(p) => p,
        Err(e) => bail!(e, policy),
    };
    let mut optimizer = Optimizer::from_config(cfg);
    let n = setup.train.len();
    let mut order: Option<(usize, Vec<usize>)> = None;

    for step in 1..=cfg.max_steps {
        let batch: Vec<&Query> = (0..cfg.batch_queries)
            .map(|i| {
                let global = (step - 1) * cfg.batch_queries + i;
                let epoch = global / n;
                if order.as_ref().map(|(e, _)| *e) != Some(epoch) {
                    order = Some((epoch, epoch_order(setup.train, cfg.seed, epoch)));
                }
                &setup.train.records[order.as_ref().unwrap().1[global % n]]
            })
            .collect();

        let step_label = step.to_string();
        let groups: Result<Vec<RolloutGroup>, GrpoError> = pool.install(|| {
            batch
                .par_iter()
                .enumerate()
                .map(|(i, q)| {
                    let seed = derive_seed(cfg.seed, &["group", &step_label, &i.to_string(), &q.id]);
                    collect_group(&policy, q, &setup.downstream, &setup.params, &setup.reward, cfg, seed)
                })
                .collect()
        });
        let groups = match groups {
            Ok(g) => g,
            Err(e) => bail!(e, policy),
        };
        let stats = match grpo_step(&mut policy, &groups, cfg, &mut optimizer, step) {
            Ok(s) => s,
            Err(e) => bail!(e, policy),
        };
        let record = StepRecord {
            step,
            mean_reward: stats.mean_reward,
            mean_kl: stats.mean_kl,
            clip_fraction: stats.clip_fraction,
            loss: stats.loss,
        };
        log::debug!("step {step}: reward {:.4} kl {:.5} clip {:.3}", record.mean_reward, record.mean_kl, record.clip_fraction);
        observer.on_step(&record, &policy);
        artifacts.reward_curve.push(record);

        if let Some(k) = cfg.reference_refresh_every {
            if step % k == 0 {
                policy.refresh_reference();
            }
        }

        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            if let Some(val) = setup.val {
                let report = evaluate_generator(
                    &policy,
                    val,
                    &setup.downstream,
                    &setup.params,
                    Selection::Greedy,
                    cfg.seed,
                    &setup.metrics,
                    cfg.max_in_flight,
                )
                .and_then(|(records, _)| {
                    slice_report("cgp-policy", &records, &setup.metrics)
                        .map(|r| r.with_meta("step", step))
                        .map_err(GrpoError::from)
                });
                match report {
                    Ok(r) => {
                        observer.on_eval(step, &r);
                        artifacts.eval_reports.push((step, r));
                    }
                    Err(e) => bail!(e, policy),
                }
            }
        }
    }
    artifacts.policy = policy;
    Ok(artifacts)
}

/// Answers every query with a CGP from `generator` and builds a report.
///
/// Downstream seeds depend only on `(seed, query id)`, so two generators
/// evaluated with the same seed face the same sampling noise.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_generator(
    generator: &dyn CgpGenerator,
    split: &Dataset,
    downstream: &Downstream<'_>,
    params: &GenerationParams,
    selection: Selection,
    seed: u64,
    metrics: &MetricSettings,
    max_in_flight: usize,
) -> Result<(Vec<EvalRecord>, CalibrationReport), GrpoError> {
    let pool = thread_pool(max_in_flight)?;
    let records: Result<Vec<EvalRecord>, GrpoError> = pool.install(|| {
        split
            .records
            .par_iter()
            .map(|q| {
                let cgp = generator.propose(q, selection, derive_seed(seed, &["eval-policy", &q.id]))?;
                let call = params.with_seed(derive_seed(seed, &["eval", &q.id]));
                let prediction = downstream
                    .answer_query(q, Some(&cgp), &call)
                    .map_err(|e| GrpoError::Backend { attempts: 1, source: e })?;
                Ok(EvalRecord::new(q.id.clone(), prediction, q.truth_index))
            })
            .collect()
    });
    let records = records?;
    let report = slice_report("cgp-policy", &records, metrics)?
        .with_meta("generator", generator.describe())
        .with_meta("backend", downstream.backend.describe())
        .with_meta("selection", serde_json::to_value(selection).expect("selection serializes"))
        .with_meta("generation", serde_json::to_value(params).expect("params serialize"))
        .with_meta("log_prob_temperature", 1.0);
    Ok((records, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{CountingBackend, FeatureEffect, RetryPolicy, Simulator, SimulatorProfile};
    use crate::data::{InvalidReason, SplitLabel};
    use crate::parsing::InstructionTemplate;
    use crate::policy::{FeatureConfig, PromptLibrary};

    fn query(i: usize) -> Query {
        Query::new(format!("q{i}"), format!("Question number {i}?"), vec!["a".into(), "b".into(), "c".into(), "d".into()], i % 4)
            .unwrap()
    }

    fn bias_policy(n: usize) -> SoftmaxPolicy {
        let lib = PromptLibrary::new((0..n).map(|i| format!("template-{i}")).collect()).unwrap();
        SoftmaxPolicy::uniform(lib, FeatureConfig::bias_only(), 256)
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(compute_advantages(&[0.0, -1.0, -1.0, -2.0], false).unwrap(), vec![1.0, 0.0, 0.0, -1.0]);
        assert_eq!(compute_advantages(&[-3.0; 5], false).unwrap(), vec![0.0; 5]);
        assert_eq!(compute_advantages(&[1.0, -1.0], true).unwrap(), vec![1.0, -1.0]);
        assert_eq!(compute_advantages(&[-3.0; 4], true).unwrap(), vec![0.0; 4]);
        assert!(matches!(compute_advantages(&[1.0], false), Err(GrpoError::Size(1))));
    }

    #[test]
    fn config_validation() {
        assert!(GrpoConfig::default().validate().is_ok());
        for bad in [
            GrpoConfig { group_size: 1, ..Default::default() },
            GrpoConfig { clip_epsilon: 1.0, ..Default::default() },
            GrpoConfig { learning_rate: 0.0, ..Default::default() },
            GrpoConfig { inner_iterations: 0, ..Default::default() },
            GrpoConfig { reference_refresh_every: Some(0), ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn collect_group_counts_calls_and_centres() {
        let q = query(1);
        let sim = CountingBackend::new(
            Simulator::new(SimulatorProfile { base_accuracy: 1.0, base_conf_spread: 0.05, ..Default::default() })
                .unwrap()
                .with_answer_key([&q]),
        );
        let t = InstructionTemplate::default();
        let d = Downstream::new(&sim, &t, RetryPolicy::none());
        let p = bias_policy(3);
        let g = collect_group(&p, &q, &d, &GenerationParams::default(), &RewardConfig::default(), &GrpoConfig::default(), 7).unwrap();
        assert_eq!(sim.calls(), 8);
        assert_eq!(g.samples.len(), 8);
        assert!(g.samples.iter().all(|s| s.reward <= 0.0 && s.prediction.is_correct(q.truth_index)));
        assert!(g.samples.iter().map(|s| s.advantage).sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn invalid_samples_keep_the_penalty() {
        let q = query(2);
        let sim = Simulator::new(SimulatorProfile { invalid_rate: 1.0, ..Default::default() }).unwrap();
        let t = InstructionTemplate::default();
        let d = Downstream::new(&sim, &t, RetryPolicy::none());
        let g = collect_group(&bias_policy(2), &q, &d, &GenerationParams::default(), &RewardConfig::default(), &GrpoConfig::default(), 1)
            .unwrap();
        assert_eq!(g.samples.len(), 8);
        for s in &g.samples {
            assert_eq!(s.reward, 1e-12f64.ln());
            assert!(!s.prediction.is_valid());
        }
    }

    #[test]
    fn failing_group_is_recollected_then_surfaced() {
        struct Flaky(std::sync::atomic::AtomicUsize);
        impl crate::backends::Backend for Flaky {
            fn generate(&self, _: &str, _: Option<&str>, _: &GenerationParams) -> Result<String, BackendError> {
                // fail on the 3rd call of the first attempt only
                if self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst) == 2 {
                    Err(BackendError::Timeout)
                } else {
                    Ok("Answer: A\nConfidence: 50".into())
                }
            }
        }
        let q = query(0);
        let b = Flaky(Default::default());
        let t = InstructionTemplate::default();
        let d = Downstream::new(&b, &t, RetryPolicy::none());
        let cfg = GrpoConfig::default();
        let g = collect_group(&bias_policy(2), &q, &d, &GenerationParams::default(), &RewardConfig::default(), &cfg, 1).unwrap();
        assert_eq!(g.samples.len(), 8);
        assert_eq!(b.0.load(std::sync::atomic::Ordering::SeqCst), 3 + 8);

        struct Down;
        impl crate::backends::Backend for Down {
            fn generate(&self, _: &str, _: Option<&str>, _: &GenerationParams) -> Result<String, BackendError> {
                Err(BackendError::Transport("refused".into()))
            }
        }
        let d = Downstream::new(&Down, &t, RetryPolicy::none());
        match collect_group(&bias_policy(2), &q, &d, &GenerationParams::default(), &RewardConfig::default(), &cfg, 1) {
            Err(GrpoError::Backend { attempts, .. }) => assert_eq!(attempts, cfg.max_group_retries + 1),
            other => panic!("{other:?}"),
        }
    }

    fn sample(action: usize, advantage: f64, log_prob_old: f64) -> RolloutSample {
        RolloutSample {
            action,
            cgp: Cgp::fixed(""),
            log_prob_old,
            prediction: Prediction::Invalid { raw_text: String::new(), reason: InvalidReason::MissingAnswer },
            reward: 0.0,
            advantage,
        }
    }

    #[test]
    fn zero_advantages_are_an_exact_no_op() {
        let mut p = bias_policy(3);
        let before = p.weights().clone();
        let lp = (1.0f64 / 3.0).ln();
        let groups = vec![RolloutGroup {
            query_id: "q".into(),
            features: ContextFeatures(vec![1.0]),
            samples: (0..4).map(|i| sample(i % 3, 0.0, lp)).collect(),
        }];
        let cfg = GrpoConfig::default();
        let mut opt = Optimizer::from_config(&cfg);
        let stats = grpo_step(&mut p, &groups, &cfg, &mut opt, 1).unwrap();
        assert_eq!(p.weights(), &before);
        assert_eq!(stats.mean_kl, 0.0);
        assert_eq!(stats.iterations[0].clip_fraction, 0.0);
    }

    #[test]
    fn first_iteration_is_never_clipped() {
        let mut p = bias_policy(3);
        let lp = (1.0f64 / 3.0).ln();
        let groups = vec![RolloutGroup {
            query_id: "q".into(),
            features: ContextFeatures(vec![1.0]),
            samples: vec![sample(0, 5.0, lp), sample(1, -5.0, lp), sample(2, 0.0, lp)],
        }];
        let cfg = GrpoConfig { learning_rate: 1.0, ..Default::default() };
        let mut opt = Optimizer::from_config(&cfg);
        let stats = grpo_step(&mut p, &groups, &cfg, &mut opt, 1).unwrap();
        assert_eq!(stats.iterations[0].clip_fraction, 0.0);
        // with lr 1 the ratio leaves [0.8, 1.2] after the first update
        assert!(stats.iterations[1..].iter().any(|i| i.clip_fraction > 0.0));
        assert!(stats.iterations[1].kl > 0.0);
    }

    #[test]
    fn divergence_is_reported() {
        let mut p = bias_policy(2);
        let groups = vec![RolloutGroup {
            query_id: "q".into(),
            features: ContextFeatures(vec![1.0]),
            samples: vec![sample(0, f64::INFINITY, 0.5f64.ln()), sample(1, 0.0, 0.5f64.ln())],
        }];
        let cfg = GrpoConfig::default();
        let mut opt = Optimizer::from_config(&cfg);
        match grpo_step(&mut p, &groups, &cfg, &mut opt, 3) {
            Err(GrpoError::Divergence(r)) => assert_eq!(r.step, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn adamw_moves_toward_gradient() {
        let cfg = GrpoConfig { optimizer: OptimizerKind::AdamW, learning_rate: 0.1, ..Default::default() };
        let mut opt = Optimizer::from_config(&cfg);
        let mut w = Matrix::zeros(2, 1);
        let g = Matrix::from_rows(vec![vec![3.0], vec![-0.001]]).unwrap();
        opt.ascend(&mut w, &g);
        // first Adam step has magnitude ~lr regardless of gradient scale
        assert!((w.get(0, 0) - 0.1).abs() < 1e-6);
        assert!((w.get(1, 0) + 0.1).abs() < 1e-4);
    }

    #[test]
    fn zero_steps_returns_initial_policy() {
        let qs: Vec<Query> = (0..4).map(query).collect();
        let train_ds = Dataset::new(qs.clone(), SplitLabel::Train).unwrap();
        let sim = Simulator::new(SimulatorProfile::default()).unwrap().with_answer_key(&qs);
        let t = InstructionTemplate::default();
        let setup = TrainingSetup {
            train: &train_ds,
            val: None,
            downstream: Downstream::new(&sim, &t, RetryPolicy::none()),
            params: GenerationParams::default(),
            reward: RewardConfig::default(),
            grpo: GrpoConfig { max_steps: 0, ..Default::default() },
            metrics: MetricSettings::default(),
        };
        let p = bias_policy(3);
        let out = train(p.clone(), &setup, &mut ()).unwrap();
        assert_eq!(out.policy, p);
        assert!(out.reward_curve.is_empty() && out.eval_reports.is_empty());
    }

    #[test]
    fn training_is_reproducible_and_evaluates() {
        let qs: Vec<Query> = (0..12).map(query).collect();
        let train_ds = Dataset::new(qs[..8].to_vec(), SplitLabel::Train).unwrap();
        let val = Dataset::new(qs[8..].to_vec(), SplitLabel::Val).unwrap();
        let profile = SimulatorProfile {
            feature_effects: vec![FeatureEffect { trigger_phrase: "template-1".into(), accuracy_delta: 0.4, conf_delta: 0.0 }],
            ..Default::default()
        };
        let sim = Simulator::new(profile).unwrap().with_answer_key(&qs);
        let t = InstructionTemplate::default();
        let setup = TrainingSetup {
            train: &train_ds,
            val: Some(&val),
            downstream: Downstream::new(&sim, &t, RetryPolicy::none()),
            params: GenerationParams::default(),
            reward: RewardConfig::default(),
            grpo: GrpoConfig { max_steps: 6, eval_every: 3, batch_queries: 3, ..Default::default() },
            metrics: MetricSettings::default(),
        };
        let a = train(bias_policy(3), &setup, &mut ()).unwrap();
        let b = train(bias_policy(3), &setup, &mut ()).unwrap();
        assert_eq!(a.reward_curve, b.reward_curve);
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.reward_curve.len(), 6);
        assert_eq!(a.reward_curve[0].mean_kl, 0.0);
        assert_eq!(a.eval_reports.iter().map(|(s, _)| *s).collect::<Vec<_>>(), vec![3, 6]);
        assert_eq!(a.eval_reports[0].1.n_total, 4);
    }
}
