//! Downstream prompt rendering and (answer, confidence) extraction.
//!
//! The rendered prompt is `question ⊕ options ⊕ CGP ⊕ instruction`. The
//! parser takes the last `Answer:` marker and the last `Confidence:` marker in
//! the model's text; anything it cannot read becomes [`Prediction::Invalid`]
//! with the raw text kept for audit.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{letter_index, option_letter, Cgp, InvalidReason, Prediction, Query};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("answer directive must mention the `Answer:` marker")]
    MissingAnswerDirective,
    #[error("confidence directive must mention the `Confidence:` marker and a 0-100 scale")]
    MissingConfidenceDirective,
}

/// Task instruction appended after the question, options and CGP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InstructionTemplate {
    pub preamble: String,
    pub answer_directive: String,
    pub confidence_directive: String,
}

impl Default for InstructionTemplate {
    fn default() -> Self {
        InstructionTemplate {
            preamble: "Answer the multiple-choice question about the medical image.".into(),
            answer_directive: "State the letter of your chosen option on its own line as \
                               'Answer: <letter>'."
                .into(),
            confidence_directive: "Then state how confident you are that your answer is correct \
                                   as a score out of 100 on its own line as \
                                   'Confidence: <number from 0 to 100>'."
                .into(),
        }
    }
}

impl InstructionTemplate {
    pub fn validate(&self) -> Result<(), TemplateError> {
        if !self.answer_directive.to_lowercase().contains("answer:") {
            return Err(TemplateError::MissingAnswerDirective);
        }
        let conf = self.confidence_directive.to_lowercase();
        if !conf.contains("confidence:") || !conf.contains("100") {
            return Err(TemplateError::MissingConfidenceDirective);
        }
        Ok(())
    }

    /// Same template with a chain-of-thought line placed before the preamble.
    pub fn with_cot(&self, cot: &str) -> InstructionTemplate {
        let mut t = self.clone();
        if !cot.is_empty() {
            t.preamble = if t.preamble.is_empty() {
                cot.to_string()
            } else {
                format!("{cot}\n{}", t.preamble)
            };
        }
        t
    }

    fn block(&self) -> String {
        [&self.preamble, &self.answer_directive, &self.confidence_directive]
            .into_iter()
            .filter(|s| !s.is_empty())
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// The question and lettered options, the part of the prompt the policy sees.
pub fn render_query_text(query: &Query) -> String {
    let mut out = format!("Question: {}\nOptions:\n", query.question);
    for (i, opt) in query.options.iter().enumerate() {
        out.push(option_letter(i));
        out.push_str(". ");
        out.push_str(opt);
        out.push('\n');
    }
    out
}

/// Renders the full downstream prompt. An absent or empty CGP adds nothing.
pub fn render_downstream_prompt(
    query: &Query,
    cgp: Option<&Cgp>,
    template: &InstructionTemplate,
) -> String {
    let mut out = render_query_text(query);
    if let Some(c) = cgp.filter(|c| !c.text.is_empty()) {
        out.push_str(&c.text);
        out.push('\n');
    }
    out.push_str(&template.block());
    out
}

static ANSWER_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\banswer\b[\s*_`#]*[:：=\-][\s*_`]*[(\[]?\s*([a-z])(?:[^a-z0-9]|$)").unwrap()
});

static CONFIDENCE_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\bconfidence\b(?:\s+(?:score|level))?[\s*_`#]*[:：=\-][\s*_`]*(-?(?:\d+(?:\.\d*)?|\.\d+))\s*(%|/\s*100)?",
    )
    .unwrap()
});

/// Reads a confidence number into `[0, 1]`, or `None` when out of range.
///
/// A number carrying `%` or `/100` is a percentage. Otherwise a value written
/// with a decimal point and at most 1 is already a probability, and anything
/// else (including a bare integer `1`) is on the 0-100 scale.
fn interpret_confidence(number: &str, percent_marker: bool) -> Option<f64> {
    let v: f64 = number.parse().ok()?;
    if !v.is_finite() || !(0.0..=100.0).contains(&v) {
        return None;
    }
    let p = if !percent_marker && number.contains('.') && v <= 1.0 {
        v
    } else {
        v / 100.0
    };
    Some(p + 0.0)
}

/// Parses free-form model output for a question with `k` options. Never fails:
/// unreadable text comes back as [`Prediction::Invalid`].
pub fn parse_prediction(raw: &str, k: usize) -> Prediction {
    let invalid = |reason| Prediction::Invalid {
        raw_text: raw.to_string(),
        reason,
    };

    let Some(answer) = ANSWER_RE.captures_iter(raw).last() else {
        return invalid(InvalidReason::MissingAnswer);
    };
    let letter = answer[1].chars().next().unwrap();
    let answer_index = match letter_index(letter) {
        Some(i) if i < k => i,
        _ => return invalid(InvalidReason::OutOfRangeOption),
    };

    let Some(conf) = CONFIDENCE_RE.captures_iter(raw).last() else {
        return invalid(InvalidReason::MissingConfidence);
    };
    match interpret_confidence(&conf[1], conf.get(2).is_some()) {
        Some(confidence) => Prediction::Valid {
            answer_index,
            confidence,
        },
        None => invalid(InvalidReason::Unparseable),
    }
}

/// Canonical text for a valid prediction, the format the simulator emits.
pub fn format_prediction(answer_index: usize, confidence: f64) -> String {
    let pct = confidence * 100.0;
    let rounded = pct.round();
    if (pct - rounded).abs() < 1e-9 {
        format!("Answer: {}\nConfidence: {}", option_letter(answer_index), rounded as i64)
    } else {
        format!("Answer: {}\nConfidence: {}", option_letter(answer_index), pct)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CgpSource;
    use proptest::prelude::*;

    fn query() -> Query {
        Query::new(
            "q1",
            "What modality?",
            vec!["CT".into(), "MRI".into(), "X-ray".into(), "PET".into()],
            1,
        )
        .unwrap()
    }

    #[test]
    fn base_prompt_has_no_cgp_segment() {
        let t = InstructionTemplate::default();
        let p = render_downstream_prompt(&query(), None, &t);
        let expected = format!(
            "Question: What modality?\nOptions:\nA. CT\nB. MRI\nC. X-ray\nD. PET\n{}\n{}\n{}",
            t.preamble, t.answer_directive, t.confidence_directive
        );
        assert_eq!(p, expected);
        let empty = Cgp::fixed("");
        assert_eq!(render_downstream_prompt(&query(), Some(&empty), &t), p);
    }

    #[test]
    fn fixed_prompt_appears_verbatim_in_order() {
        let t = InstructionTemplate::default();
        let c = Cgp::fixed("think step-by-step, do not be over-confident");
        let p = render_downstream_prompt(&query(), Some(&c), &t);
        let q = p.find("What modality?").unwrap();
        let opt = p.find("D. PET").unwrap();
        let cgp = p.find("think step-by-step, do not be over-confident").unwrap();
        let ins = p.find(&t.preamble).unwrap();
        assert!(q < opt && opt < cgp && cgp < ins);
        assert_eq!(p, render_downstream_prompt(&query(), Some(&c), &t));
    }

    #[test]
    fn distinct_cgps_render_distinctly() {
        let t = InstructionTemplate::default();
        let a = Cgp::new("alpha", CgpSource::Learned, 256).unwrap();
        let b = Cgp::new("beta", CgpSource::Learned, 256).unwrap();
        assert_ne!(
            render_downstream_prompt(&query(), Some(&a), &t),
            render_downstream_prompt(&query(), Some(&b), &t)
        );
    }

    #[test]
    fn default_template_validates() {
        assert!(InstructionTemplate::default().validate().is_ok());
        let t = InstructionTemplate { confidence_directive: "How sure are you?".into(), ..Default::default() };
        assert_eq!(t.validate(), Err(TemplateError::MissingConfidenceDirective));
        let t = InstructionTemplate { answer_directive: "Pick one.".into(), ..Default::default() };
        assert_eq!(t.validate(), Err(TemplateError::MissingAnswerDirective));
    }

    #[test]
    fn cot_goes_before_preamble() {
        let t = InstructionTemplate::default().with_cot("Let's think step by step.");
        assert!(t.preamble.starts_with("Let's think step by step.\n"));
    }

    #[test]
    fn spec_examples() {
        assert_eq!(
            parse_prediction("Answer: B\nConfidence: 90", 4),
            Prediction::Valid { answer_index: 1, confidence: 0.9 }
        );
        assert!(matches!(
            parse_prediction("The answer is probably right", 4),
            Prediction::Invalid { reason: InvalidReason::MissingAnswer, .. }
        ));
        assert!(matches!(
            parse_prediction("Answer: E, Confidence: 50", 4),
            Prediction::Invalid { reason: InvalidReason::OutOfRangeOption, .. }
        ));
        assert_eq!(
            parse_prediction("Answer: A ... Answer: C\nConfidence: 20\nConfidence: 75", 4),
            Prediction::Valid { answer_index: 2, confidence: 0.75 }
        );
    }

    #[test]
    fn confidence_scales() {
        let conf = |s: &str| parse_prediction(&format!("Answer: A\nConfidence: {s}"), 4).confidence();
        assert_eq!(conf("1"), Some(0.01));
        assert_eq!(conf("0.9"), Some(0.9));
        assert_eq!(conf("1.0"), Some(1.0));
        assert_eq!(conf("100"), Some(1.0));
        assert_eq!(conf("85%"), Some(0.85));
        assert_eq!(conf("90/100"), Some(0.9));
        assert_eq!(conf("0"), Some(0.0));
        assert_eq!(conf("150"), None);
        assert_eq!(conf("-5"), None);
    }

    #[test]
    fn invalid_keeps_raw_text() {
        match parse_prediction("Answer: C\nConfidence: 101", 4) {
            Prediction::Invalid { raw_text, reason } => {
                assert_eq!(raw_text, "Answer: C\nConfidence: 101");
                assert_eq!(reason, InvalidReason::Unparseable);
            }
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn canonical_format_round_trips(k in 2usize..=26, idx in 0usize..26, pct in 0u32..=100) {
            let idx = idx % k;
            let conf = pct as f64 / 100.0;
            let text = format_prediction(idx, conf);
            prop_assert_eq!(
                parse_prediction(&text, k),
                Prediction::Valid { answer_index: idx, confidence: conf }
            );
        }

        #[test]
        fn parse_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..256), k in 2usize..8) {
            let s = String::from_utf8_lossy(&bytes);
            if let Prediction::Valid { answer_index, confidence } = parse_prediction(&s, k) {
                prop_assert!(answer_index < k);
                prop_assert!((0.0..=1.0).contains(&confidence));
            }
        }
    }
}
