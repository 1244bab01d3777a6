//! The serialization grammar shared by teacher training and pseudolabel parsing.
//!
//! A (question, answer) pair is flattened into a single decoder target string
//! of the frozen form [`QA_TEMPLATE`]. The teacher learns to emit that string;
//! generations are parsed back with [`parse_qa`], and anything that does not
//! match the grammar exactly is rejected with a reason so pseudolabel noise
//! stays measurable. Also hosts the caption-to-boolean-question probe template
//! and the answer normalizer used by exact-match scoring.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The frozen serialization template. Changing this string is a breaking
/// format change for every persisted pseudolabel file.
pub const QA_TEMPLATE: &str = "Question: <question>? Answer: <answer>.";

/// The two literal marker tokens of [`QA_TEMPLATE`], in template order.
pub const QA_MARKERS: [&str; 2] = ["Question:", "Answer:"];

/// The probe template that recasts a caption as a boolean question.
pub const CAPTION_PROBE_TEMPLATE: &str = "is this a <caption>?";

/// A validated (question, answer) pair.
///
/// The question carries no trailing `?` and the answer no trailing `.`;
/// punctuation is owned by the template. The first `?` after `Question:` is
/// what splits the two fields at parse time, so questions may not contain `?`
/// anywhere — enforced here rather than at parse time.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QAPair {
    question: String,
    answer: String,
}

/// Why a [`QAPair`] could not be constructed.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum InvalidPair {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("answer is empty")]
    EmptyAnswer,
    #[error("question contains '?'")]
    QuestionMarkInQuestion,
    #[error("answer ends with '.'")]
    TrailingDotInAnswer,
    #[error("field contains a reserved marker substring: {0}")]
    ReservedMarker(String),
}

impl QAPair {
    pub fn new(question: impl Into<String>, answer: impl Into<String>) -> Result<Self, InvalidPair> {
        let question = question.into();
        let answer = answer.into();
        if question.is_empty() {
            return Err(InvalidPair::EmptyQuestion);
        }
        if answer.is_empty() {
            return Err(InvalidPair::EmptyAnswer);
        }
        if question.contains('?') {
            return Err(InvalidPair::QuestionMarkInQuestion);
        }
        if answer.ends_with('.') {
            return Err(InvalidPair::TrailingDotInAnswer);
        }
        for marker in QA_MARKERS {
            if question.contains(marker) || answer.contains(marker) {
                return Err(InvalidPair::ReservedMarker(marker.to_string()));
            }
        }
        Ok(Self { question, answer })
    }

    pub fn question(&self) -> &str {
        &self.question
    }

    pub fn answer(&self) -> &str {
        &self.answer
    }
}

/// A string known to match [`QA_TEMPLATE`] exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerializedQA(pub String);

impl SerializedQA {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Why [`parse_qa`] rejected an input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RejectReason {
    /// Input does not begin with `Question: `.
    NoQuestionMarker,
    /// No `? Answer: ` separator in the required position.
    NoAnswerMarker,
    /// Question or answer field is empty.
    EmptyField,
    /// Content after the terminal `.`, a missing terminal `.`, or any other
    /// deviation from the grammar past the markers.
    TrailingGarbage,
}

impl RejectReason {
    pub fn label(&self) -> &'static str {
        match self {
            RejectReason::NoQuestionMarker => "no-question-marker",
            RejectReason::NoAnswerMarker => "no-answer-marker",
            RejectReason::EmptyField => "empty-field",
            RejectReason::TrailingGarbage => "trailing-garbage",
        }
    }
}

/// Result of parsing one candidate generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseOutcome {
    Parsed(QAPair),
    Rejected(RejectReason),
}

impl ParseOutcome {
    pub fn pair(&self) -> Option<&QAPair> {
        match self {
            ParseOutcome::Parsed(p) => Some(p),
            ParseOutcome::Rejected(_) => None,
        }
    }
}

/// Instantiates [`QA_TEMPLATE`] for a validated pair. Deterministic.
pub fn serialize_qa(pair: &QAPair) -> SerializedQA {
    SerializedQA(format!("Question: {}? Answer: {}.", pair.question, pair.answer))
}

fn grammar() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // Lazy question group: the first '?' ends the question. The answer group
    // is anchored to a single terminal '.', so embedded dots stay inside the
    // answer but anything after the final dot fails the match.
    RE.get_or_init(|| Regex::new(r"^Question: (.*?)\? Answer: (.*?)\.$").expect("static regexp"))
}

/// Parses text against the exact template grammar.
///
/// Leading/trailing whitespace around the whole text is tolerated; everything
/// else must match [`QA_TEMPLATE`] byte for byte. Rejections are values, not
/// errors, because malformed generations are an expected, counted outcome.
pub fn parse_qa(text: &str) -> ParseOutcome {
    let trimmed = text.trim();
    if let Some(caps) = grammar().captures(trimmed) {
        let question = caps.get(1).expect("group 1").as_str();
        let answer = caps.get(2).expect("group 2").as_str();
        if question.is_empty() || answer.is_empty() {
            return ParseOutcome::Rejected(RejectReason::EmptyField);
        }
        return match QAPair::new(question, answer) {
            Ok(pair) => ParseOutcome::Parsed(pair),
            // Regex-matched text can still violate pair invariants (a nested
            // marker, an extra '?' swallowed by backtracking, a doubled final
            // dot). All of those are grammar abuse past the markers.
            Err(_) => ParseOutcome::Rejected(RejectReason::TrailingGarbage),
        };
    }
    // Classify the failure for the rejection statistics.
    let Some(rest) = trimmed.strip_prefix("Question: ") else {
        return ParseOutcome::Rejected(RejectReason::NoQuestionMarker);
    };
    let Some((question, rest)) = rest.split_once("? Answer: ") else {
        return ParseOutcome::Rejected(RejectReason::NoAnswerMarker);
    };
    let answer = rest.strip_suffix('.').unwrap_or(rest);
    if question.is_empty() || answer.is_empty() {
        return ParseOutcome::Rejected(RejectReason::EmptyField);
    }
    ParseOutcome::Rejected(RejectReason::TrailingGarbage)
}

/// Error for an empty caption handed to [`serialize_caption_probe`].
#[derive(Debug, Error, PartialEq, Eq)]
#[error("caption is empty")]
pub struct InvalidCaption;

/// Wraps a caption as a boolean question: `is this a <caption>?`.
///
/// Not idempotent by design: probing twice wraps twice.
pub fn serialize_caption_probe(caption: &str) -> Result<String, InvalidCaption> {
    if caption.trim().is_empty() {
        return Err(InvalidCaption);
    }
    Ok(format!("is this a {caption}?"))
}

/// Canonicalizes an answer for exact-match scoring: lowercase, trim, strip
/// terminal punctuation, collapse internal whitespace runs to single spaces.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let stripped = lowered.trim().trim_end_matches(['.', '?', '!']);
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}
