//! Comparison confidence estimators that do not learn a CGP.
//!
//! * Verbalized: one call, the model states its own confidence.
//! * Verbalized with a fixed prompt: the same, with one static sentence as the CGP.
//! * Consistency: the share of sampled answers that agree with the first one.
//! * Avg-Conf: answers weighted by their stated confidence across samples.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Downstream, GenerationParams};
use crate::data::{Cgp, Dataset, InvalidReason, Prediction, Query};
use crate::grpo::thread_pool;
use crate::metrics::{slice_report, CalibrationReport, EvalRecord, MetricSettings, MetricsError};
use crate::policy::FIXED_PA_PROMPT;
use crate::seed::derive_seed;

pub const DEFAULT_COT_PREAMBLE: &str = "Let's think step by step before answering.";

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("invalid baseline spec: {0}")]
    Spec(String),
    #[error("query {query_id}: {source}")]
    Backend {
        query_id: String,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Verbalized,
    VerbalizedFixedPa,
    Consistency,
    AvgConf,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::Verbalized,
        BaselineKind::VerbalizedFixedPa,
        BaselineKind::Consistency,
        BaselineKind::AvgConf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Verbalized => "verbalized",
            BaselineKind::VerbalizedFixedPa => "verbalized_fixed_pa",
            BaselineKind::Consistency => "consistency",
            BaselineKind::AvgConf => "avg_conf",
        }
    }

    pub fn is_sampling(self) -> bool {
        matches!(self, BaselineKind::Consistency | BaselineKind::AvgConf)
    }
}

impl std::fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = BaselineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| BaselineError::Spec(format!("unknown baseline kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    pub n_samples: usize,
    pub fixed_prompt: String,
    pub cot_preamble: bool,
    pub cot_text: String,
}

impl BaselineSpec {
    pub fn new(kind: BaselineKind) -> Self {
        BaselineSpec {
            kind,
            n_samples: 21,
            fixed_prompt: FIXED_PA_PROMPT.to_string(),
            cot_preamble: kind.is_sampling(),
            cot_text: DEFAULT_COT_PREAMBLE.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.n_samples == 0 {
            return Err(BaselineError::Spec("n_samples must be >= 1".into()));
        }
        if self.kind == BaselineKind::VerbalizedFixedPa && self.fixed_prompt.trim().is_empty() {
            return Err(BaselineError::Spec("fixed_prompt must be non-empty".into()));
        }
        Ok(())
    }

    /// Backend calls issued per query.
    pub fn calls_per_query(&self) -> usize {
        if self.kind.is_sampling() {
            self.n_samples
        } else {
            1
        }
    }

    fn cot(&self) -> Option<&str> {
        (self.cot_preamble && !self.cot_text.trim().is_empty()).then_some(self.cot_text.as_str())
    }
}

/// One direct call; `fixed_prompt` is inserted as the CGP when present.
pub fn run_verbalized(
    downstream: &Downstream<'_>,
    query: &Query,
    params: &GenerationParams,
    fixed_prompt: Option<&str>,
) -> Result<EvalRecord, BackendError> {
    let cgp = fixed_prompt.map(Cgp::fixed);
    let prediction = downstream.answer_query(query, cgp.as_ref(), params)?;
    Ok(EvalRecord::new(query.id.clone(), prediction, query.truth_index))
}

/// Draws `n_samples` answers. Sample `i` is seeded from `(params.seed, i)`;
/// sample 0 is the original response.
pub fn sample_predictions(
    downstream: &Downstream<'_>,
    query: &Query,
    params: &GenerationParams,
    n_samples: usize,
    cot: Option<&str>,
) -> Result<Vec<Prediction>, BackendError> {
    let template = match cot {
        Some(c) => downstream.template.with_cot(c),
        None => downstream.template.clone(),
    };
    let base = params.seed.unwrap_or(0);
    (0..n_samples)
        .map(|i| {
            let call = params.with_seed(derive_seed(base, &["sample", &i.to_string()]));
            downstream.answer_with_template(query, None, &template, &call)
        })
        .collect()
}

/// Answer of the first sample, confidence = fraction of samples (the first
/// included) giving that same answer. Invalid samples never match.
pub fn aggregate_consistency(samples: &[Prediction]) -> Prediction {
    let Some(original) = samples.first() else {
        return Prediction::Invalid {
            raw_text: String::new(),
            reason: InvalidReason::MissingAnswer,
        };
    };
    let Some(answer) = original.answer() else {
        return original.clone();
    };
    let matching = samples.iter().filter(|p| p.answer() == Some(answer)).count();
    Prediction::Valid {
        answer_index: answer,
        confidence: matching as f64 / samples.len() as f64,
    }
}

/// Confidence mass per answer over valid samples, normalised to sum to 1.
/// When every valid sample states zero confidence, answers are weighted by count.
///
/// Confidences are summed as integer multiples of 1e-9 so the result does not
/// depend on sample order and simple fixtures produce exact ratios.
pub fn avg_conf_scores(samples: &[Prediction]) -> Vec<(usize, f64)> {
    let valid: Vec<(usize, u64)> = samples
        .iter()
        .filter_map(|p| Some((p.answer()?, (p.confidence()? * MASS_UNITS).round() as u64)))
        .collect();
    let total: u64 = valid.iter().map(|(_, c)| c).sum();
    let mut mass: std::collections::BTreeMap<usize, u64> = Default::default();
    for &(a, c) in &valid {
        *mass.entry(a).or_default() += if total > 0 { c } else { 1 };
    }
    let denom = if total > 0 { total } else { valid.len() as u64 };
    mass.into_iter().map(|(a, m)| (a, m as f64 / denom as f64)).collect()
}

const MASS_UNITS: f64 = 1e9;

/// Highest-mass answer (lowest option index on ties) with its mass as confidence.
pub fn aggregate_avg_conf(samples: &[Prediction]) -> Prediction {
    let scores = avg_conf_scores(samples);
    let best = scores
        .iter()
        .fold(None::<(usize, f64)>, |best, &(a, s)| match best {
            Some((_, bs)) if bs >= s => best,
            _ => Some((a, s)),
        });
    match best {
        Some((answer_index, confidence)) => Prediction::Valid {
            answer_index,
            confidence: confidence.min(1.0),
        },
        None => samples.first().cloned().unwrap_or(Prediction::Invalid {
            raw_text: String::new(),
            reason: InvalidReason::MissingAnswer,
        }),
    }
}

pub fn run_consistency(
    downstream: &Downstream<'_>,
    query: &Query,
    params: &GenerationParams,
    n_samples: usize,
    cot: Option<&str>,
) -> Result<EvalRecord, BackendError> {
    let samples = sample_predictions(downstream, query, params, n_samples, cot)?;
    Ok(EvalRecord::new(query.id.clone(), aggregate_consistency(&samples), query.truth_index))
}

pub fn run_avg_conf(
    downstream: &Downstream<'_>,
    query: &Query,
    params: &GenerationParams,
    n_samples: usize,
    cot: Option<&str>,
) -> Result<EvalRecord, BackendError> {
    let samples = sample_predictions(downstream, query, params, n_samples, cot)?;
    Ok(EvalRecord::new(query.id.clone(), aggregate_avg_conf(&samples), query.truth_index))
}

/// Runs one baseline over a split. Query `q` uses the downstream seed
/// `derive_seed(seed, ["eval", q.id])`, the same one policy evaluation uses.
pub fn run_baseline(
    spec: &BaselineSpec,
    split: &Dataset,
    downstream: &Downstream<'_>,
    params: &GenerationParams,
    seed: u64,
    metrics: &MetricSettings,
    max_in_flight: usize,
) -> Result<(Vec<EvalRecord>, CalibrationReport), BaselineError> {
    spec.validate()?;
    let pool = thread_pool(max_in_flight).map_err(|e| BaselineError::ThreadPool(e.to_string()))?;
    let records: Result<Vec<EvalRecord>, BaselineError> = pool.install(|| {
        split
            .records
            .par_iter()
            .map(|q| {
                let call = params.with_seed(derive_seed(seed, &["eval", &q.id]));
                let out = match spec.kind {
                    BaselineKind::Verbalized => run_verbalized(downstream, q, &call, None),
                    BaselineKind::VerbalizedFixedPa => run_verbalized(downstream, q, &call, Some(&spec.fixed_prompt)),
                    BaselineKind::Consistency => run_consistency(downstream, q, &call, spec.n_samples, spec.cot()),
                    BaselineKind::AvgConf => run_avg_conf(downstream, q, &call, spec.n_samples, spec.cot()),
                };
                out.map_err(|source| BaselineError::Backend {
                    query_id: q.id.clone(),
                    source,
                })
            })
            .collect()
    });
    let records = records?;
    let mut report = slice_report(spec.kind.name(), &records, metrics)?
        .with_meta("baseline", spec.kind.name())
        .with_meta("backend", downstream.backend.describe())
        .with_meta("generation", serde_json::to_value(params).expect("params serialize"));
    if spec.kind.is_sampling() {
        report = report
            .with_meta("n_samples", spec.n_samples)
            .with_meta("original_response_counted", true)
            .with_meta("cot_preamble", spec.cot().unwrap_or(""));
    }
    if spec.kind == BaselineKind::VerbalizedFixedPa {
        report = report.with_meta("fixed_prompt", spec.fixed_prompt.as_str());
    }
    Ok((records, report))
}
