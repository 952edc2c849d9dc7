//! The `train`, `eval`, `baseline`, `report` and `config init` subcommands.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cgpo_core::backends::{Backend, Downstream, RemoteBackend, Simulator};
use cgpo_core::baselines::{run_baseline, BaselineKind};
use cgpo_core::grpo::{evaluate_generator, train, GrpoError, StepRecord, TrainObserver, TrainingSetup, REWARD_CURVE_HEADER};
use cgpo_core::metrics::{curve_csv, EvalRecord, MetricSettings};
use cgpo_core::policy::{CgpGenerator, PolicyCheckpoint, PolicyError, PromptLibrary, RemoteLlmPolicy, Selection, SoftmaxPolicy};
use cgpo_core::seed::derive_seed;
use cgpo_core::{load_dataset, split_sample, CalibrationReport, Dataset, Query, SplitLabel};

use crate::config::{commented_default, BackendConfig, GeneratorConfig, RunConfig};
use crate::report::{label_reports, load_report, write_outputs};
use crate::{io_err, CliError};

pub const CONFIG_SNAPSHOT: &str = "config.snapshot.toml";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const PARTIAL_CHECKPOINT: &str = "checkpoint.partial.json";
pub const REWARD_CURVE: &str = "reward_curve.csv";
pub const DIVERGENCE: &str = "divergence.json";
pub const RECORDS: &str = "records.jsonl";
pub const REPORT: &str = "report.json";
pub const RELIABILITY: &str = "reliability.csv";

/// Creates `dir`. Existing artifacts of this command are an error unless
/// `force`, in which case they are removed.
fn prepare_dir(dir: &Path, force: bool, is_artifact: impl Fn(&str) -> bool) -> Result<(), CliError> {
    if dir.is_dir() {
        let existing: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| io_err("cannot list", dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file() && p.file_name().and_then(|n| n.to_str()).is_some_and(&is_artifact))
            .collect();
        if !existing.is_empty() {
            if !force {
                return Err(CliError::User(format!(
                    "{} already holds results ({}); pass --force to overwrite",
                    dir.display(),
                    existing[0].display()
                )));
            }
            for p in existing {
                fs::remove_file(&p).map_err(|e| io_err("cannot remove", &p, e))?;
            }
        }
    }
    fs::create_dir_all(dir).map_err(|e| io_err("cannot create", dir, e))
}

fn fmt_ece(report: &CalibrationReport) -> String {
    report.ece.map_or_else(|| "n/a".to_string(), |e| format!("{e:.4}"))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err("cannot write", path, e))
}

pub fn split_label(s: &str) -> Result<SplitLabel, CliError> {
    match s.to_ascii_lowercase().as_str() {
        "train" => Ok(SplitLabel::Train),
        "val" | "validation" => Ok(SplitLabel::Val),
        "test" => Ok(SplitLabel::Test),
        other => Err(CliError::User(format!("unknown split {other:?} (expected train, val or test)"))),
    }
}

/// Loads and subsamples one split as configured.
pub fn load_split(cfg: &RunConfig, split: SplitLabel) -> Result<Dataset, CliError> {
    let (path, size, field) = match split {
        SplitLabel::Train => (&cfg.data.train_path, Some(cfg.data.train_size), "data.train_path"),
        SplitLabel::Val => (&cfg.data.val_path, Some(cfg.data.val_size), "data.val_path"),
        SplitLabel::Test => (&cfg.data.test_path, cfg.data.test_size, "data.test_path"),
    };
    let path = path.as_ref().ok_or_else(|| CliError::User(format!("{field} is required for the {split} split")))?;
    let full = load_dataset(path, split)?;
    let n = size.unwrap_or(full.len());
    if n > full.len() {
        return Err(CliError::User(format!(
            "{field}: {} holds {} records but the {split} size is {n}; lower data.{split}_size",
            path.display(),
            full.len()
        )));
    }
    Ok(split_sample(&full, n, derive_seed(cfg.seed, &["data", &split.to_string()]))?)
}

/// Downstream model. The simulator's answer key covers `queries`.
pub fn build_backend<'q>(cfg: &RunConfig, queries: impl IntoIterator<Item = &'q Query>) -> Result<Box<dyn Backend>, CliError> {
    match &cfg.backend {
        BackendConfig::Simulator { profile, .. } => Ok(Box::new(
            Simulator::new(profile.clone())
                .map_err(|e| CliError::User(format!("backend.profile: {e}")))?
                .with_answer_key(queries),
        )),
        BackendConfig::Remote(remote) => Ok(Box::new(
            RemoteBackend::new(remote.clone()).map_err(|e| CliError::User(format!("backend: {e}")))?,
        )),
    }
}

pub fn load_library(cfg: &RunConfig) -> Result<PromptLibrary, CliError> {
    match &cfg.policy.library_path {
        Some(p) => PromptLibrary::load(p).map_err(|e| CliError::User(format!("policy.library_path: {e}"))),
        None => Ok(PromptLibrary::default()),
    }
}

fn grpo_error(e: GrpoError) -> CliError {
    match e {
        GrpoError::Config(m) => CliError::User(format!("grpo: {m}")),
        other => CliError::Internal(other.to_string()),
    }
}

fn metric_settings(cfg: &RunConfig, extra_incorrect: Option<usize>) -> MetricSettings {
    MetricSettings {
        extra_incorrect: extra_incorrect.unwrap_or(cfg.metrics.extra_incorrect),
        ..cfg.metrics
    }
}

/// Streams the reward curve and periodic evaluations to the run directory.
struct RunWriter {
    dir: PathBuf,
    curve: BufWriter<File>,
    error: Option<CliError>,
}

impl RunWriter {
    fn new(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(REWARD_CURVE);
        let file = File::create(&path).map_err(|e| io_err("cannot create", &path, e))?;
        let mut curve = BufWriter::new(file);
        writeln!(curve, "{REWARD_CURVE_HEADER}").map_err(|e| io_err("cannot write", &path, e))?;
        curve.flush().map_err(|e| io_err("cannot write", &path, e))?;
        Ok(RunWriter { dir: dir.to_path_buf(), curve, error: None })
    }

    fn record(&mut self, r: Result<(), CliError>) {
        if let (Err(e), None) = (r, &self.error) {
            self.error = Some(e);
        }
    }
}

impl TrainObserver for RunWriter {
    fn on_step(&mut self, record: &StepRecord, _: &SoftmaxPolicy) {
        let path = self.dir.join(REWARD_CURVE);
        let r = writeln!(self.curve, "{}", record.csv_row())
            .and_then(|_| self.curve.flush())
            .map_err(|e| io_err("cannot write", &path, e));
        self.record(r);
        log::info!(
            "step {}: mean reward {:.4}, kl {:.5}, clipped {:.3}",
            record.step,
            record.mean_reward,
            record.mean_kl,
            record.clip_fraction
        );
    }

    fn on_eval(&mut self, step: usize, report: &CalibrationReport) {
        let path = self.dir.join(format!("eval_step_{step}.json"));
        let r = write_file(&path, &report.to_json());
        self.record(r);
        log::info!("step {step}: validation ece {}, accuracy {:.4}", fmt_ece(report), report.accuracy_all);
    }
}

fn is_train_artifact(name: &str) -> bool {
    [CONFIG_SNAPSHOT, CHECKPOINT, PARTIAL_CHECKPOINT, REWARD_CURVE, DIVERGENCE].contains(&name)
        || (name.starts_with("eval_step_") && name.ends_with(".json"))
}

/// Trains a softmax policy and writes the run directory. Returns its path.
pub fn cmd_train(config: &Path, force: bool) -> Result<PathBuf, CliError> {
    let cfg = RunConfig::load(config)?;
    if cfg.policy.generator != GeneratorConfig::Softmax {
        return Err(CliError::User("policy.generator: only the softmax generator can be trained".into()));
    }
    let train_ds = load_split(&cfg, SplitLabel::Train)?;
    let val = match cfg.data.val_path {
        Some(_) => Some(load_split(&cfg, SplitLabel::Val)?),
        None if cfg.grpo.eval_every > 0 => {
            return Err(CliError::User("data.val_path is required when grpo.eval_every > 0".into()))
        }
        None => None,
    };
    let library = load_library(&cfg)?;

    let dir = cfg.output_dir.clone();
    prepare_dir(&dir, force, is_train_artifact)?;
    write_file(&dir.join(CONFIG_SNAPSHOT), &cfg.to_toml())?;

    let backend = build_backend(&cfg, train_ds.iter().chain(val.iter().flat_map(|v| v.iter())))?;
    let setup = TrainingSetup {
        train: &train_ds,
        val: val.as_ref(),
        downstream: Downstream::new(backend.as_ref(), &cfg.template, cfg.retry),
        params: cfg.generation.params(),
        reward: cfg.reward,
        grpo: cfg.grpo_config(),
        metrics: metric_settings(&cfg, None),
    };
    let policy = SoftmaxPolicy::uniform(library, cfg.policy.features.clone(), cfg.policy.cgp_budget_tokens);
    let mut writer = RunWriter::new(&dir)?;
    log::info!("training on {} queries for {} steps", train_ds.len(), setup.grpo.max_steps);
    let result = train(policy, &setup, &mut writer);
    if let Some(e) = writer.error.take() {
        return Err(e);
    }
    match result {
        Ok(artifacts) => {
            let path = dir.join(CHECKPOINT);
            artifacts.policy.to_checkpoint().save(&path).map_err(|e| CliError::Internal(e.to_string()))?;
            log::info!("wrote {}", dir.display());
            Ok(dir)
        }
        Err(err) => {
            let path = dir.join(PARTIAL_CHECKPOINT);
            let _ = err.partial.policy.to_checkpoint().save(&path);
            if let GrpoError::Divergence(report) = &err.source {
                let _ = write_file(&dir.join(DIVERGENCE), &serde_json::to_string_pretty(report).unwrap_or_default());
            }
            Err(grpo_error(err.source))
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub checkpoint: Option<PathBuf>,
    pub split: SplitLabel,
    /// Sample CGPs at the rollout temperature instead of taking the argmax.
    pub sample: bool,
    pub extra_incorrect: Option<usize>,
    pub out: Option<PathBuf>,
    pub force: bool,
}

fn is_eval_artifact(name: &str) -> bool {
    [RECORDS, REPORT, RELIABILITY].contains(&name)
}

fn write_eval_outputs(dir: &Path, records: &[EvalRecord], report: &CalibrationReport) -> Result<(), CliError> {
    let mut lines = String::new();
    for r in records {
        lines.push_str(&serde_json::to_string(r).expect("record serializes"));
        lines.push('\n');
    }
    write_file(&dir.join(RECORDS), &lines)?;
    write_file(&dir.join(REPORT), &report.to_json())?;
    write_file(&dir.join(RELIABILITY), &curve_csv(&report.bins))
}

fn policy_error(e: PolicyError) -> CliError {
    match e {
        PolicyError::Backend(b) => CliError::Internal(b.to_string()),
        other => CliError::User(other.to_string()),
    }
}

/// Evaluates a checkpoint (or a remote generator) on a split.
pub fn cmd_eval(config: &Path, opts: &EvalOptions) -> Result<PathBuf, CliError> {
    let cfg = RunConfig::load(config)?;
    let split = load_split(&cfg, opts.split)?;
    let backend = build_backend(&cfg, split.iter())?;
    let params = cfg.generation.params();

    let generator: Box<dyn CgpGenerator> = match &cfg.policy.generator {
        GeneratorConfig::Softmax => {
            let path = opts
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::User("--checkpoint is required for the softmax generator".into()))?;
            let ckpt = PolicyCheckpoint::load(path).map_err(policy_error)?;
            let policy = SoftmaxPolicy::from_checkpoint(&ckpt, load_library(&cfg)?, cfg.policy.features.clone(), cfg.policy.cgp_budget_tokens)
                .map_err(policy_error)?;
            Box::new(policy)
        }
        GeneratorConfig::RemoteLlm { endpoint, instruction } => {
            let remote = RemoteBackend::new(endpoint.clone()).map_err(|e| CliError::User(format!("policy.generator: {e}")))?;
            let mut g = RemoteLlmPolicy::new(remote, params);
            g.instruction = instruction.clone();
            g.retry = cfg.retry;
            g.max_prompt_tokens = cfg.generation.max_prompt_tokens;
            Box::new(g)
        }
    };
    let selection = if opts.sample {
        Selection::Sample { temperature: cfg.grpo.sampling_temperature }
    } else {
        Selection::Greedy
    };
    let dir = opts.out.clone().unwrap_or_else(|| cfg.output_dir.join(format!("eval-{}", opts.split)));
    prepare_dir(&dir, opts.force, is_eval_artifact)?;
    let downstream = Downstream::new(backend.as_ref(), &cfg.template, cfg.retry);
    let metrics = metric_settings(&cfg, opts.extra_incorrect);
    let (records, report) =
        evaluate_generator(generator.as_ref(), &split, &downstream, &params, selection, cfg.seed, &metrics, cfg.grpo.max_in_flight)
            .map_err(grpo_error)?;
    let report = report.with_meta("split", opts.split.to_string()).with_meta("seed", cfg.seed);
    write_eval_outputs(&dir, &records, &report)?;
    log::info!("{}: ece {}, accuracy {:.4}", dir.display(), fmt_ece(&report), report.accuracy_all);
    Ok(dir)
}

#[derive(Debug, Clone)]
pub struct BaselineOptions {
    pub kind: BaselineKind,
    pub split: SplitLabel,
    pub extra_incorrect: Option<usize>,
    pub out: Option<PathBuf>,
    pub force: bool,
}

/// Runs one comparison method over a split.
pub fn cmd_baseline(config: &Path, opts: &BaselineOptions) -> Result<PathBuf, CliError> {
    let cfg = RunConfig::load(config)?;
    let split = load_split(&cfg, opts.split)?;
    let backend = build_backend(&cfg, split.iter())?;
    cmd_baseline_with(&cfg, &split, backend.as_ref(), opts)
}

/// [`cmd_baseline`] with the split and backend supplied by the caller.
pub fn cmd_baseline_with(cfg: &RunConfig, split: &Dataset, backend: &dyn Backend, opts: &BaselineOptions) -> Result<PathBuf, CliError> {
    let spec = cfg.baselines.spec(opts.kind);
    let dir = opts
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join(format!("baseline-{}-{}", opts.kind, opts.split)));
    prepare_dir(&dir, opts.force, is_eval_artifact)?;
    let downstream = Downstream::new(backend, &cfg.template, cfg.retry);
    let metrics = metric_settings(cfg, opts.extra_incorrect);
    let (records, report) = run_baseline(&spec, split, &downstream, &cfg.generation.params(), cfg.seed, &metrics, cfg.grpo.max_in_flight)
        .map_err(|e| match e {
            cgpo_core::baselines::BaselineError::Spec(m) => CliError::User(m),
            other => CliError::Internal(other.to_string()),
        })?;
    let report = report.with_meta("split", opts.split.to_string()).with_meta("seed", cfg.seed);
    write_eval_outputs(&dir, &records, &report)?;
    log::info!("{}: ece {}, accuracy {:.4}", dir.display(), fmt_ece(&report), report.accuracy_all);
    Ok(dir)
}

fn is_report_artifact(name: &str) -> bool {
    name == "comparison.csv" || name == "curves.csv" || name == "reliability.svg" || (name.starts_with("curve_") && name.ends_with(".csv"))
}

/// Merges reports from eval/baseline directories into comparison outputs.
pub fn cmd_report(inputs: &[PathBuf], out: &Path, svg: bool, force: bool) -> Result<Vec<PathBuf>, CliError> {
    let loaded = inputs
        .iter()
        .map(|p| load_report(p).map(|r| (p.clone(), r)))
        .collect::<Result<Vec<_>, _>>()?;
    let labeled = label_reports(loaded)?;
    prepare_dir(out, force, is_report_artifact)?;
    write_outputs(&labeled, out, svg)
}

/// Writes the commented default config to `out`, or returns it for stdout.
pub fn cmd_config_init(out: Option<&Path>, force: bool) -> Result<Option<String>, CliError> {
    let text = commented_default();
    match out {
        None => Ok(Some(text)),
        Some(p) => {
            if p.exists() && !force {
                return Err(CliError::User(format!("{} exists; pass --force to overwrite", p.display())));
            }
            write_file(p, &text)?;
            Ok(None)
        }
    }
}
