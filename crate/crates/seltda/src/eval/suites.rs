//! Robustness suites: paraphrase consistency, counterexample gaps, numeric
//! reasoning, and domain generalization.
//!
//! Each suite guards its input shape (a rephrasing split must carry group
//! ids, a numeric split must be all count questions, a shifted split must
//! actually be shifted) so that passing the wrong manifest is an error
//! rather than a silently meaningless number.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::pipeline::DatasetManifest;
use crate::synthworld::{Family, WorldSpec, COUNTEREXAMPLE_TAG_SUFFIX};
use crate::templating::normalize_answer;

use super::{score_split, Answerer, EvalError, EvalReport};

// ---------------------------------------------------------------------------
// Rephrasing consistency
// ---------------------------------------------------------------------------

/// Accuracy and answer stability over a paraphrase split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub split: String,
    pub answerer: String,
    /// Paraphrase records scored.
    pub n: usize,
    pub mean_accuracy: f64,
    /// Paraphrase groups (one per original record).
    pub groups: usize,
    /// Fraction of groups whose paraphrases all received the same
    /// normalized answer — right or wrong, stability is what is measured.
    pub group_consistency: f64,
}

/// Scores a rephrasing split and measures within-group answer stability.
///
/// Every record must carry a group id tying it to its original; a split
/// without them is not a rephrasing split.
pub fn rephrasing_consistency(
    answerer: &mut dyn Answerer,
    rephrasings: &DatasetManifest,
) -> Result<ConsistencyReport, EvalError> {
    if let Some(bad) = rephrasings.records.iter().find(|r| r.group_id.is_none()) {
        return Err(EvalError::WrongSuite {
            split: rephrasings.split.clone(),
            reason: format!("record {:?} has no group id; not a rephrasing split", bad.id),
        });
    }
    let scored = score_split(answerer, rephrasings)?;

    let mut groups: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut correct = 0usize;
    for rec in &scored {
        let group = rec.group.as_deref().expect("guarded above");
        groups.entry(group).or_default().push(normalize_answer(&rec.model));
        if rec.correct {
            correct += 1;
        }
    }
    let consistent = groups
        .values()
        .filter(|answers| answers.iter().all(|a| a == &answers[0]))
        .count();

    Ok(ConsistencyReport {
        split: rephrasings.split.clone(),
        answerer: answerer.label(),
        n: scored.len(),
        mean_accuracy: correct as f64 / scored.len() as f64,
        groups: groups.len(),
        group_consistency: consistent as f64 / groups.len() as f64,
    })
}

// ---------------------------------------------------------------------------
// Counterexample gap
// ---------------------------------------------------------------------------

/// Accuracy on shortcut-breaking scenes next to matched ordinary questions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleReport {
    pub counterexample: EvalReport,
    pub matched: EvalReport,
    /// Matched accuracy minus counterexample accuracy: what relying on the
    /// spurious correlation costs when it breaks.
    pub gap: f64,
}

/// Scores a counterexample split against a matched ordinary split and
/// reports the accuracy gap between them.
pub fn counterexample_eval(
    answerer: &mut dyn Answerer,
    counterexamples: &DatasetManifest,
    matched: &DatasetManifest,
) -> Result<CounterexampleReport, EvalError> {
    if let Some(bad) = counterexamples
        .records
        .iter()
        .find(|r| !r.style_tag.ends_with(COUNTEREXAMPLE_TAG_SUFFIX))
    {
        return Err(EvalError::WrongSuite {
            split: counterexamples.split.clone(),
            reason: format!("record {:?} is not a counterexample scene", bad.id),
        });
    }
    if let Some(bad) =
        matched.records.iter().find(|r| r.style_tag.ends_with(COUNTEREXAMPLE_TAG_SUFFIX))
    {
        return Err(EvalError::WrongSuite {
            split: matched.split.clone(),
            reason: format!("matched split contains counterexample record {:?}", bad.id),
        });
    }
    let ce_scored = score_split(answerer, counterexamples)?;
    let matched_scored = score_split(answerer, matched)?;
    let label = answerer.label();
    let ce_report = EvalReport::from_scored(&counterexamples.split, &label, &ce_scored);
    let matched_report = EvalReport::from_scored(&matched.split, &label, &matched_scored);
    let gap = matched_report.accuracy - ce_report.accuracy;
    Ok(CounterexampleReport { counterexample: ce_report, matched: matched_report, gap })
}

// ---------------------------------------------------------------------------
// Numeric reasoning
// ---------------------------------------------------------------------------

/// Accuracy on count questions plus the answer distributions, which show
/// whether a model counts or just emits the modal numeral.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericReport {
    pub report: EvalReport,
    /// Normalized gold answers and their frequencies.
    pub gold_histogram: BTreeMap<String, usize>,
    /// Normalized model answers and their frequencies.
    pub model_histogram: BTreeMap<String, usize>,
}

/// Scores a count-only split and histograms both answer distributions.
pub fn numeric_eval(
    answerer: &mut dyn Answerer,
    numeric: &DatasetManifest,
) -> Result<NumericReport, EvalError> {
    if let Some(bad) =
        numeric.records.iter().find(|r| r.family.known() != Some(Family::Count))
    {
        return Err(EvalError::WrongSuite {
            split: numeric.split.clone(),
            reason: format!("record {:?} is not a count question ({})", bad.id, bad.family),
        });
    }
    let scored = score_split(answerer, numeric)?;
    let mut gold_histogram: BTreeMap<String, usize> = BTreeMap::new();
    let mut model_histogram: BTreeMap<String, usize> = BTreeMap::new();
    for rec in &scored {
        *gold_histogram.entry(normalize_answer(&rec.gold)).or_insert(0) += 1;
        *model_histogram.entry(normalize_answer(&rec.model)).or_insert(0) += 1;
    }
    let report = EvalReport::from_scored(&numeric.split, &answerer.label(), &scored);
    Ok(NumericReport { report, gold_histogram, model_histogram })
}

// ---------------------------------------------------------------------------
// Domain generalization
// ---------------------------------------------------------------------------

/// Accuracy under domain shift, overall and restricted to questions whose
/// gold answers the source domain could have produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub full: EvalReport,
    /// Scores over the records whose gold answer uses only source-domain
    /// surface words (plus yes/no); `None` when no record qualifies. A
    /// model trained on the source domain can at best guess the rest, so
    /// this sub-split is where transfer actually shows.
    pub shared_vocab: Option<EvalReport>,
}

/// Scores a shifted-domain split, overall and on its shared-vocabulary
/// subset. `source` is the world the answerer was trained under; passing a
/// split that still carries the source style tag is an error.
pub fn domain_generalization_eval(
    answerer: &mut dyn Answerer,
    shifted: &DatasetManifest,
    source: &WorldSpec,
) -> Result<DomainReport, EvalError> {
    if shifted.records.iter().any(|r| r.style_tag == source.style_tag) {
        return Err(EvalError::StyleCollision(shifted.split.clone()));
    }
    let scored = score_split(answerer, shifted)?;
    let label = answerer.label();
    let full = EvalReport::from_scored(&shifted.split, &label, &scored);

    let mut shared_words: BTreeSet<String> =
        source.surface_words().into_iter().map(|w| normalize_answer(&w)).collect();
    shared_words.insert("yes".to_string());
    shared_words.insert("no".to_string());
    let shared_scored: Vec<_> = scored
        .iter()
        .filter(|rec| {
            normalize_answer(&rec.gold).split_whitespace().all(|w| shared_words.contains(w))
        })
        .cloned()
        .collect();
    let shared_vocab = if shared_scored.is_empty() {
        None
    } else {
        Some(EvalReport::from_scored(
            &format!("{}-shared-vocab", shifted.split),
            &label,
            &shared_scored,
        ))
    };
    Ok(DomainReport { full, shared_vocab })
}
