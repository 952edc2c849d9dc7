//! Calibration and accuracy metrics.
//!
//! Invalid predictions count as incorrect for accuracy and are excluded from
//! ECE, Brier and the reliability curve. Records can also be padded with
//! denominator-only "extra incorrect" samples for items the downstream model
//! refused outright.
//!
//! Binning: `n_bins` equal-width bins over `[0, 1]`, the first closed at 0
//! (`[0, 1/n]`) and the rest left-open (`(i/n, (i+1)/n]`). Sums run in record
//! order, so results are bit-reproducible.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::data::Prediction;

pub const REPORT_SCHEMA_VERSION: &str = "1.0";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no valid records to aggregate")]
    NoValidRecords,
    #[error("no records to aggregate")]
    Empty,
    #[error("n_bins must be at least 1")]
    ZeroBins,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: String,
    pub prediction: Prediction,
    pub truth_index: usize,
}

impl EvalRecord {
    pub fn new(query_id: impl Into<String>, prediction: Prediction, truth_index: usize) -> Self {
        EvalRecord {
            query_id: query_id.into(),
            prediction,
            truth_index,
        }
    }

    pub fn is_correct(&self) -> bool {
        self.prediction.is_correct(self.truth_index)
    }

    /// `(confidence, outcome)` for valid records.
    fn scored(&self) -> Option<(f64, f64)> {
        self.prediction
            .confidence()
            .map(|c| (c, if self.is_correct() { 1.0 } else { 0.0 }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_conf: Option<f64>,
    pub mean_acc: Option<f64>,
}

/// Lower edge of bin `i`.
fn edge(i: usize, n_bins: usize) -> f64 {
    i as f64 / n_bins as f64
}

/// Bin holding confidence `p` under the closed-at-zero, left-open convention.
pub fn bin_index(p: f64, n_bins: usize) -> usize {
    if p <= 0.0 || p.is_nan() {
        return 0;
    }
    let mut idx = ((p * n_bins as f64).ceil() as usize).clamp(1, n_bins) - 1;
    // p * n can land one ulp above an integer; edges are authoritative
    while idx > 0 && p <= edge(idx, n_bins) {
        idx -= 1;
    }
    while idx + 1 < n_bins && p > edge(idx + 1, n_bins) {
        idx += 1;
    }
    idx
}

struct BinAccumulator {
    count: usize,
    conf_sum: f64,
    acc_sum: f64,
}

fn accumulate(records: &[EvalRecord], n_bins: usize) -> Result<(Vec<BinAccumulator>, usize), MetricsError> {
    if n_bins == 0 {
        return Err(MetricsError::ZeroBins);
    }
    let mut bins: Vec<BinAccumulator> = (0..n_bins)
        .map(|_| BinAccumulator {
            count: 0,
            conf_sum: 0.0,
            acc_sum: 0.0,
        })
        .collect();
    let mut n_valid = 0;
    for (conf, outcome) in records.iter().filter_map(EvalRecord::scored) {
        let b = &mut bins[bin_index(conf, n_bins)];
        b.count += 1;
        b.conf_sum += conf;
        b.acc_sum += outcome;
        n_valid += 1;
    }
    if n_valid == 0 {
        return Err(MetricsError::NoValidRecords);
    }
    Ok((bins, n_valid))
}

/// Expected calibration error over valid records.
pub fn ece(records: &[EvalRecord], n_bins: usize) -> Result<f64, MetricsError> {
    let (bins, n_valid) = accumulate(records, n_bins)?;
    let mut total = 0.0;
    for b in bins.iter().filter(|b| b.count > 0) {
        let n = b.count as f64;
        total += (n / n_valid as f64) * (b.acc_sum / n - b.conf_sum / n).abs();
    }
    Ok(total)
}

/// Mean squared gap between confidence and 0/1 correctness over valid records.
pub fn brier(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (conf, outcome) in records.iter().filter_map(EvalRecord::scored) {
        sum += (conf - outcome).powi(2);
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::NoValidRecords);
    }
    Ok(sum / n as f64)
}

/// Correct valid records over all records plus `extra_incorrect`.
pub fn accuracy_all(records: &[EvalRecord], extra_incorrect: usize) -> Result<f64, MetricsError> {
    let denom = records.len() + extra_incorrect;
    if denom == 0 {
        return Err(MetricsError::Empty);
    }
    let correct = records.iter().filter(|r| r.is_correct()).count();
    Ok(correct as f64 / denom as f64)
}

/// Per-bin counts and means; empty bins keep `count = 0` and no means.
pub fn reliability_curve(records: &[EvalRecord], n_bins: usize) -> Result<Vec<Bin>, MetricsError> {
    let (bins, _) = accumulate(records, n_bins)?;
    Ok(bins
        .into_iter()
        .enumerate()
        .map(|(i, b)| {
            let n = b.count as f64;
            Bin {
                lo: edge(i, n_bins),
                hi: edge(i + 1, n_bins),
                count: b.count,
                mean_conf: (b.count > 0).then(|| b.conf_sum / n),
                mean_acc: (b.count > 0).then(|| b.acc_sum / n),
            }
        })
        .collect())
}

pub const CURVE_CSV_HEADER: &str = "bin_lo,bin_hi,count,mean_conf,mean_acc";

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Reliability curve as CSV; absent means are empty cells.
pub fn curve_csv(bins: &[Bin]) -> String {
    let mut out = String::from(CURVE_CSV_HEADER);
    out.push('\n');
    for b in bins {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            b.lo,
            b.hi,
            b.count,
            opt_cell(b.mean_conf),
            opt_cell(b.mean_acc)
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricSettings {
    pub n_bins: usize,
    pub conf_threshold: f64,
    pub extra_incorrect: usize,
}

impl Default for MetricSettings {
    fn default() -> Self {
        MetricSettings {
            n_bins: 10,
            conf_threshold: 0.85,
            extra_incorrect: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub n_bins: usize,
    pub conf_threshold: f64,
    pub extra_incorrect: usize,
    /// Standard deviation convention used for `avg_conf_incorrect_std`.
    pub std_kind: String,
    #[serde(default)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub schema_version: String,
    pub method: String,
    /// Absent when no record is valid.
    pub ece: Option<f64>,
    pub brier: Option<f64>,
    pub accuracy_all: f64,
    /// Accuracy denominator: records plus extra incorrect samples.
    pub n_total: usize,
    pub n_records: usize,
    pub n_valid: usize,
    pub high_conf_accuracy: Option<f64>,
    pub high_conf_count: usize,
    pub avg_conf_incorrect: Option<f64>,
    pub avg_conf_incorrect_std: Option<f64>,
    pub bins: Vec<Bin>,
    pub metadata: ReportMetadata,
}

impl CalibrationReport {
    pub fn with_meta(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.metadata.extra.insert(key.to_string(), value.into());
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Major component of `schema_version`.
    pub fn schema_major(&self) -> Option<u32> {
        self.schema_version.split('.').next()?.parse().ok()
    }
}

/// Full report: scalar metrics, slices and reliability bins.
pub fn slice_report(
    method: &str,
    records: &[EvalRecord],
    settings: &MetricSettings,
) -> Result<CalibrationReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    if settings.n_bins == 0 {
        return Err(MetricsError::ZeroBins);
    }
    let n_valid = records.iter().filter(|r| r.prediction.is_valid()).count();
    let absent_if_empty = |r: Result<f64, MetricsError>| match r {
        Ok(v) => Ok(Some(v)),
        Err(MetricsError::NoValidRecords) => Ok(None),
        Err(e) => Err(e),
    };
    let ece_v = absent_if_empty(ece(records, settings.n_bins))?;
    let brier_v = absent_if_empty(brier(records))?;
    let bins = match reliability_curve(records, settings.n_bins) {
        Ok(b) => b,
        Err(MetricsError::NoValidRecords) => (0..settings.n_bins)
            .map(|i| Bin {
                lo: edge(i, settings.n_bins),
                hi: edge(i + 1, settings.n_bins),
                count: 0,
                mean_conf: None,
                mean_acc: None,
            })
            .collect(),
        Err(e) => return Err(e),
    };

    let (mut hc_n, mut hc_correct) = (0usize, 0usize);
    let mut wrong_conf = Vec::new();
    for r in records {
        if let Some((conf, outcome)) = r.scored() {
            if conf >= settings.conf_threshold {
                hc_n += 1;
                hc_correct += outcome as usize;
            }
            if outcome == 0.0 {
                wrong_conf.push(conf);
            }
        }
    }
    let (avg_wrong, std_wrong) = if wrong_conf.is_empty() {
        (None, None)
    } else {
        let n = wrong_conf.len() as f64;
        let mean = wrong_conf.iter().sum::<f64>() / n;
        let var = wrong_conf.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
        (Some(mean), Some(var.sqrt()))
    };

    Ok(CalibrationReport {
        schema_version: REPORT_SCHEMA_VERSION.to_string(),
        method: method.to_string(),
        ece: ece_v,
        brier: brier_v,
        accuracy_all: accuracy_all(records, settings.extra_incorrect)?,
        n_total: records.len() + settings.extra_incorrect,
        n_records: records.len(),
        n_valid,
        high_conf_accuracy: (hc_n > 0).then(|| hc_correct as f64 / hc_n as f64),
        high_conf_count: hc_n,
        avg_conf_incorrect: avg_wrong,
        avg_conf_incorrect_std: std_wrong,
        bins,
        metadata: ReportMetadata {
            n_bins: settings.n_bins,
            conf_threshold: settings.conf_threshold,
            extra_incorrect: settings.extra_incorrect,
            std_kind: "population".to_string(),
            extra: BTreeMap::new(),
        },
    })
}
