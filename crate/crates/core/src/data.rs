//! Query, CGP and prediction types, JSON Lines dataset ingestion and
//! deterministic subsampling.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::seed::derive_seed;

/// Characters per token used to turn token budgets into character budgets.
pub const CHARS_PER_TOKEN: usize = 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error at line {line}: field `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },
    #[error("duplicate query id `{id}` at line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("requested {requested} records but dataset only has {available}")]
    Size { requested: usize, available: usize },
    #[error("invalid query `{id}`: {message}")]
    InvalidQuery { id: String, message: String },
    #[error("CGP text is {len} chars, budget is {budget}")]
    CgpTooLong { len: usize, budget: usize },
}

/// One multiple-choice VQA instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    /// Opaque image reference forwarded verbatim to backends.
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "image")]
    pub image_ref: Option<String>,
    pub question: String,
    pub options: Vec<String>,
    #[serde(rename = "answer")]
    pub truth_index: usize,
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl Query {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        options: Vec<String>,
        truth_index: usize,
    ) -> Result<Self, DataError> {
        let q = Query {
            id: id.into(),
            image_ref: None,
            question: question.into(),
            options,
            truth_index,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn with_image(mut self, image_ref: impl Into<String>) -> Self {
        self.image_ref = Some(image_ref.into());
        self
    }

    pub fn num_options(&self) -> usize {
        self.options.len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |message: &str| {
            Err(DataError::InvalidQuery {
                id: self.id.clone(),
                message: message.to_string(),
            })
        };
        if self.id.is_empty() {
            return fail("id is empty");
        }
        if self.question.trim().is_empty() {
            return fail("question is empty");
        }
        if self.options.len() < 2 {
            return fail("at least two options are required");
        }
        if self.options.len() > 26 {
            return fail("at most 26 options can be lettered");
        }
        let mut seen = HashSet::new();
        for opt in &self.options {
            let norm = normalize_ws(opt);
            if norm.is_empty() {
                return fail("option text is empty");
            }
            if !seen.insert(norm) {
                return fail("options are not distinct");
            }
        }
        if self.truth_index >= self.options.len() {
            return fail("answer index out of range");
        }
        Ok(())
    }
}

/// Letter for a 0-based option index (`0 -> 'A'`).
pub fn option_letter(index: usize) -> char {
    debug_assert!(index < 26);
    (b'A' + index as u8) as char
}

/// 0-based index for an option letter, case-insensitive.
pub fn letter_index(letter: char) -> Option<usize> {
    let up = letter.to_ascii_uppercase();
    up.is_ascii_uppercase().then(|| (up as u8 - b'A') as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CgpSource {
    Learned,
    Fixed,
    None,
}

/// Calibration guidance prompt appended to a downstream query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cgp {
    pub text: String,
    pub source: CgpSource,
}

impl Cgp {
    /// Builds a CGP, rejecting text longer than `budget_tokens` worth of characters.
    pub fn new(
        text: impl Into<String>,
        source: CgpSource,
        budget_tokens: usize,
    ) -> Result<Self, DataError> {
        let text = text.into();
        let budget = budget_tokens * CHARS_PER_TOKEN;
        let len = text.chars().count();
        if len > budget {
            return Err(DataError::CgpTooLong { len, budget });
        }
        Ok(Cgp { text, source })
    }

    /// Builds a CGP, cutting the text at the character budget.
    pub fn truncated(text: &str, source: CgpSource, budget_tokens: usize) -> Self {
        let budget = budget_tokens * CHARS_PER_TOKEN;
        let text = match text.char_indices().nth(budget) {
            Some((cut, _)) => text[..cut].to_string(),
            None => text.to_string(),
        };
        Cgp { text, source }
    }

    pub fn fixed(text: impl Into<String>) -> Self {
        Cgp {
            text: text.into(),
            source: CgpSource::Fixed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    MissingAnswer,
    MissingConfidence,
    Unparseable,
    OutOfRangeOption,
}

/// Parsed downstream output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Prediction {
    Valid {
        answer_index: usize,
        /// Verbalized confidence in `[0, 1]`.
        confidence: f64,
    },
    Invalid {
        raw_text: String,
        reason: InvalidReason,
    },
}

impl Prediction {
    pub fn is_valid(&self) -> bool {
        matches!(self, Prediction::Valid { .. })
    }

    pub fn answer(&self) -> Option<usize> {
        match self {
            Prediction::Valid { answer_index, .. } => Some(*answer_index),
            Prediction::Invalid { .. } => None,
        }
    }

    pub fn confidence(&self) -> Option<f64> {
        match self {
            Prediction::Valid { confidence, .. } => Some(*confidence),
            Prediction::Invalid { .. } => None,
        }
    }

    pub fn is_correct(&self, truth_index: usize) -> bool {
        self.answer() == Some(truth_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitLabel {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitLabel::Train => "train",
            SplitLabel::Val => "val",
            SplitLabel::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<Query>,
    pub split: SplitLabel,
}

impl Dataset {
    /// Builds a dataset, enforcing per-query invariants and unique ids.
    pub fn new(records: Vec<Query>, split: SplitLabel) -> Result<Self, DataError> {
        let mut ids = HashSet::new();
        for (i, q) in records.iter().enumerate() {
            q.validate()?;
            if !ids.insert(q.id.as_str()) {
                return Err(DataError::DuplicateId {
                    id: q.id.clone(),
                    line: i + 1,
                });
            }
        }
        Ok(Dataset { records, split })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Query> {
        self.records.iter()
    }

    /// Serializes to JSON Lines in the ingestion schema (integer answers).
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for q in &self.records {
            out.push_str(&serde_json::to_string(q).expect("query serializes"));
            out.push('\n');
        }
        out
    }
}

fn schema(line: usize, field: &str, message: impl Into<String>) -> DataError {
    DataError::Schema {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn parse_answer(value: &Value, k: usize, line: usize) -> Result<usize, DataError> {
    let idx = match value {
        Value::Number(n) => n
            .as_u64()
            .ok_or_else(|| schema(line, "answer", "expected a non-negative integer"))?
            as usize,
        Value::String(s) => {
            let t = s.trim();
            let mut chars = t.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) if c.is_ascii_alphabetic() => letter_index(c).unwrap(),
                _ => return Err(schema(line, "answer", format!("unrecognized answer `{s}`"))),
            }
        }
        _ => return Err(schema(line, "answer", "expected integer index or option letter")),
    };
    if idx >= k {
        return Err(schema(line, "answer", format!("answer {idx} out of range for {k} options")));
    }
    Ok(idx)
}

/// Parses one JSON Lines record. `line` is 1-based and only used in errors.
pub fn parse_record(text: &str, line: usize) -> Result<Query, DataError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| schema(line, "<record>", e.to_string()))?;
    let obj: &Map<String, Value> = value
        .as_object()
        .ok_or_else(|| schema(line, "<record>", "expected a JSON object"))?;

    let id = match obj.get("id") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => return Err(schema(line, "id", "expected a non-empty string")),
        None => return Err(schema(line, "id", "missing")),
    };
    let question = match obj.get("question") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
        Some(_) => return Err(schema(line, "question", "expected non-empty text")),
        None => return Err(schema(line, "question", "missing")),
    };
    let options = match obj.get("options") {
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| schema(line, "options", "options must be strings"))
            })
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => return Err(schema(line, "options", "expected an array")),
        None => return Err(schema(line, "options", "missing")),
    };
    if options.len() < 2 {
        return Err(schema(line, "options", "at least two options are required"));
    }
    let truth_index = match obj.get("answer") {
        Some(v) => parse_answer(v, options.len(), line)?,
        None => return Err(schema(line, "answer", "missing")),
    };
    let image_ref = match obj.get("image") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(schema(line, "image", "expected a string")),
    };

    let query = Query {
        id,
        image_ref,
        question,
        options,
        truth_index,
    };
    query.validate().map_err(|e| match e {
        DataError::InvalidQuery { message, .. } => schema(line, "options", message),
        other => other,
    })?;
    Ok(query)
}

/// Loads a JSON Lines dataset. Blank lines are skipped; unknown fields are ignored.
pub fn load_dataset(path: impl AsRef<Path>, split: SplitLabel) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let q = parse_record(&line, line_no)?;
        if !ids.insert(q.id.clone()) {
            return Err(DataError::DuplicateId {
                id: q.id,
                line: line_no,
            });
        }
        records.push(q);
    }
    Ok(Dataset { records, split })
}

/// Deterministic pseudo-random subset of `n` records.
///
/// The result depends only on the record ids, `n` and `seed`: records are
/// first put in id order, then shuffled with a seeded ChaCha stream.
pub fn split_sample(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset, DataError> {
    if n > dataset.len() {
        return Err(DataError::Size {
            requested: n,
            available: dataset.len(),
        });
    }
    let mut order: Vec<&Query> = dataset.records.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["split_sample"]));
    order.shuffle(&mut rng);
    Ok(Dataset {
        records: order.into_iter().take(n).cloned().collect(),
        split: dataset.split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn synthetic(n: usize) -> Dataset {
        let records = (0..n)
            .map(|i| {
                Query::new(
                    format!("q{i}"),
                    format!("Question {i}?"),
                    vec!["a".into(), "b".into(), "c".into(), "d".into()],
                    i % 4,
                )
                .unwrap()
            })
            .collect();
        Dataset::new(records, SplitLabel::Train).unwrap()
    }

    #[test]
    fn letter_answer_maps_to_index() {
        let f = write_lines(&[
            r#"{"id":"q1","question":"What modality?","options":["CT","MRI","X-ray","PET"],"answer":"B"}"#,
        ]);
        let ds = load_dataset(f.path(), SplitLabel::Train).unwrap();
        assert_eq!(ds.records[0].truth_index, 1);
        assert_eq!(ds.records[0].image_ref, None);
    }

    #[test]
    fn integer_answer_and_image_and_unknown_fields() {
        let f = write_lines(&[
            r#"{"id":"q1","question":"Q?","options":["x","y"],"answer":0,"image":"img/1.png","extra":{"k":1}}"#,
        ]);
        let ds = load_dataset(f.path(), SplitLabel::Val).unwrap();
        assert_eq!(ds.records[0].truth_index, 0);
        assert_eq!(ds.records[0].image_ref.as_deref(), Some("img/1.png"));
    }

    #[test]
    fn missing_options_is_schema_error_with_line() {
        let f = write_lines(&[
            r#"{"id":"q1","question":"Q?","options":["x","y"],"answer":0}"#,
            r#"{"id":"q2","question":"Q?","answer":"A"}"#,
        ]);
        match load_dataset(f.path(), SplitLabel::Train) {
            Err(DataError::Schema { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "options");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicates_bad_answers_and_repeated_options() {
        let dup = write_lines(&[
            r#"{"id":"q1","question":"Q?","options":["x","y"],"answer":0}"#,
            r#"{"id":"q1","question":"Q2?","options":["x","y"],"answer":1}"#,
        ]);
        assert!(matches!(
            load_dataset(dup.path(), SplitLabel::Train),
            Err(DataError::DuplicateId { line: 2, .. })
        ));
        for bad in [
            r#"{"id":"q1","question":"Q?","options":["x","y"],"answer":"C"}"#,
            r#"{"id":"q1","question":"Q?","options":["x","y"],"answer":2}"#,
            r#"{"id":"q1","question":"Q?","options":["x","y"],"answer":-1}"#,
            r#"{"id":"q1","question":"Q?","options":["x"," x "],"answer":0}"#,
            r#"{"id":"q1","question":"  ","options":["x","y"],"answer":0}"#,
            r#"[1,2]"#,
        ] {
            let f = write_lines(&[bad]);
            assert!(
                matches!(load_dataset(f.path(), SplitLabel::Train), Err(DataError::Schema { line: 1, .. })),
                "{bad}"
            );
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_dataset("/nonexistent/file.jsonl", SplitLabel::Test),
            Err(DataError::Io { .. })
        ));
    }

    #[test]
    fn five_thousand_line_file_loads() {
        let ds = synthetic(5000);
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(ds.to_jsonl().as_bytes()).unwrap();
        let loaded = load_dataset(f.path(), SplitLabel::Train).unwrap();
        assert_eq!(loaded.len(), 5000);
        let ids: HashSet<_> = loaded.iter().map(|q| &q.id).collect();
        assert_eq!(ids.len(), 5000);
        assert_eq!(loaded, ds);
    }

    #[test]
    fn split_sample_full_size_is_permutation() {
        let ds = synthetic(1000);
        let s = split_sample(&ds, 1000, 3).unwrap();
        let mut a: Vec<_> = s.iter().map(|q| q.id.clone()).collect();
        assert_ne!(a, ds.iter().map(|q| q.id.clone()).collect::<Vec<_>>());
        a.sort();
        let mut b: Vec<_> = ds.iter().map(|q| q.id.clone()).collect();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn split_sample_is_deterministic_and_seed_sensitive() {
        let ds = synthetic(1000);
        let a = split_sample(&ds, 100, 7).unwrap();
        let b = split_sample(&ds, 100, 7).unwrap();
        let c = split_sample(&ds, 100, 8).unwrap();
        assert_eq!(a, b);
        let ids_a: HashSet<_> = a.iter().map(|q| &q.id).collect();
        let ids_c: HashSet<_> = c.iter().map(|q| &q.id).collect();
        assert_ne!(ids_a, ids_c);
    }

    #[test]
    fn split_sample_ignores_input_order() {
        let ds = synthetic(200);
        let mut rev = ds.clone();
        rev.records.reverse();
        assert_eq!(split_sample(&ds, 50, 1).unwrap(), split_sample(&rev, 50, 1).unwrap());
    }

    #[test]
    fn split_sample_rejects_oversize() {
        let ds = synthetic(10);
        assert!(matches!(
            split_sample(&ds, 11, 0),
            Err(DataError::Size { requested: 11, available: 10 })
        ));
    }

    #[test]
    fn cgp_budget() {
        assert!(Cgp::new("x".repeat(1024), CgpSource::Learned, 256).is_ok());
        assert!(matches!(
            Cgp::new("x".repeat(1025), CgpSource::Learned, 256),
            Err(DataError::CgpTooLong { len: 1025, budget: 1024 })
        ));
        assert_eq!(Cgp::truncated(&"é".repeat(10), CgpSource::Learned, 1).text, "éééé");
    }
}
