//! Post-hoc pseudolabel auditing and question-diversity statistics.
//!
//! The training loop deliberately never filters pseudolabels through the
//! oracle — learning from noisy self-generated labels is the point. The
//! audit is the after-the-fact measurement of that noise: how many teacher
//! questions parse into a template family at all, how many are answerable
//! in their scene, and how many carry the oracle-correct answer. Diversity
//! statistics sit alongside it to show whether generated questions add
//! anything beyond the real distribution.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::pipeline::DatasetManifest;
use crate::synthworld::{match_question, oracle_answer, scene_for_record, OracleOutcome, WorldSpec};
use crate::templating::normalize_answer;

use super::EvalError;

/// Bucket for questions that parse into no template family.
pub const UNMATCHED_FAMILY: &str = "unmatched";

/// Audit tallies for one bucket of records. The counts always nest:
/// `answer_correct ≤ answerable ≤ well_posed ≤ n`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditScore {
    pub n: usize,
    /// Questions that parse into some template family.
    pub well_posed: usize,
    /// Well-posed questions whose referent exists unambiguously in the scene.
    pub answerable: usize,
    /// Answerable questions whose stored answer matches the oracle's.
    pub answer_correct: usize,
}

impl AuditScore {
    pub fn well_posed_rate(&self) -> f64 {
        self.well_posed as f64 / self.n as f64
    }

    pub fn answerable_rate(&self) -> f64 {
        self.answerable as f64 / self.n as f64
    }

    pub fn answer_correct_rate(&self) -> f64 {
        self.answer_correct as f64 / self.n as f64
    }

    fn add(&mut self, well_posed: bool, answerable: bool, correct: bool) {
        self.n += 1;
        self.well_posed += well_posed as usize;
        self.answerable += answerable as usize;
        self.answer_correct += correct as usize;
    }
}

/// Oracle audit of a (typically pseudolabeled) split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub split: String,
    pub total: AuditScore,
    /// Keyed by the family each question parses into — detected from the
    /// text, not from the record's tag, since pseudolabels carry none.
    /// Unparseable questions land under [`UNMATCHED_FAMILY`].
    pub per_family: BTreeMap<String, AuditScore>,
}

/// Audits every record of a split against the oracle.
///
/// Nothing upstream consumes this — the loop trains on the records as they
/// are — so the report is diagnostic only.
pub fn pseudolabel_audit(
    split: &DatasetManifest,
    spec: &Arc<WorldSpec>,
) -> Result<AuditReport, EvalError> {
    if split.is_empty() {
        return Err(EvalError::EmptySplit(split.split.clone()));
    }
    let world_hash = spec.content_hash();
    let mut total = AuditScore::default();
    let mut per_family: BTreeMap<String, AuditScore> = BTreeMap::new();

    for record in &split.records {
        if record.world_hash != world_hash {
            return Err(EvalError::WorldMismatch { id: record.id.clone() });
        }
        let (family, well_posed, answerable, correct) =
            match match_question(spec, &record.question) {
                None => (UNMATCHED_FAMILY.to_string(), false, false, false),
                Some(parsed) => {
                    let scene = scene_for_record(spec, record.scene_seed, &record.style_tag);
                    let outcome = oracle_answer(&scene, &record.question)
                        .expect("question already matched a template");
                    match outcome {
                        OracleOutcome::Unanswerable => {
                            (parsed.family.label().to_string(), true, false, false)
                        }
                        OracleOutcome::Answer(gold) => {
                            let correct =
                                normalize_answer(&record.answer) == normalize_answer(&gold);
                            (parsed.family.label().to_string(), true, true, correct)
                        }
                    }
                }
            };
        total.add(well_posed, answerable, correct);
        per_family.entry(family).or_default().add(well_posed, answerable, correct);
    }

    Ok(AuditReport { split: split.split.clone(), total, per_family })
}

// ---------------------------------------------------------------------------
// Question diversity
// ---------------------------------------------------------------------------

/// Lexical statistics over one set of questions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetDiversity {
    pub n_questions: usize,
    /// Unique n-gram counts over whitespace tokens, for n = 1, 2, 3.
    pub distinct_ngrams: [usize; 3],
    /// Unique-to-total n-gram ratios; an order with no n-grams at all
    /// reports 1.0 (vacuously diverse).
    pub distinct_ngram_ratio: [f64; 3],
    /// Distinct words over total words — identical to the first ratio,
    /// named for what it is.
    pub type_token_ratio: f64,
    /// Question length in words → count.
    pub length_histogram: BTreeMap<usize, usize>,
    /// Detected template family (or [`UNMATCHED_FAMILY`]) → count.
    pub family_distribution: BTreeMap<String, usize>,
}

/// Side-by-side diversity of the real and generated question sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub real: SetDiversity,
    pub synthetic: SetDiversity,
}

fn set_diversity(split: &DatasetManifest, spec: &WorldSpec) -> SetDiversity {
    let mut distinct: [BTreeSet<String>; 3] = Default::default();
    let mut totals = [0usize; 3];
    let mut length_histogram: BTreeMap<usize, usize> = BTreeMap::new();
    let mut family_distribution: BTreeMap<String, usize> = BTreeMap::new();

    for record in &split.records {
        let words: Vec<&str> = record.question.split_whitespace().collect();
        *length_histogram.entry(words.len()).or_insert(0) += 1;
        for (order, (set, total)) in distinct.iter_mut().zip(totals.iter_mut()).enumerate() {
            let n = order + 1;
            for gram in words.windows(n) {
                set.insert(gram.join(" "));
                *total += 1;
            }
        }
        let family = match_question(spec, &record.question)
            .map(|p| p.family.label().to_string())
            .unwrap_or_else(|| UNMATCHED_FAMILY.to_string());
        *family_distribution.entry(family).or_insert(0) += 1;
    }

    let distinct_ngrams =
        [distinct[0].len(), distinct[1].len(), distinct[2].len()];
    let mut distinct_ngram_ratio = [1.0f64; 3];
    for i in 0..3 {
        if totals[i] > 0 {
            distinct_ngram_ratio[i] = distinct_ngrams[i] as f64 / totals[i] as f64;
        }
    }
    SetDiversity {
        n_questions: split.len(),
        distinct_ngrams,
        distinct_ngram_ratio,
        type_token_ratio: distinct_ngram_ratio[0],
        length_histogram,
        family_distribution,
    }
}

/// Diversity of generated questions next to the real ones they augment.
pub fn question_diversity(
    real: &DatasetManifest,
    synthetic: &DatasetManifest,
    spec: &WorldSpec,
) -> Result<DiversityReport, EvalError> {
    if real.is_empty() {
        return Err(EvalError::EmptySplit(real.split.clone()));
    }
    if synthetic.is_empty() {
        return Err(EvalError::EmptySplit(synthetic.split.clone()));
    }
    Ok(DiversityReport {
        real: set_diversity(real, spec),
        synthetic: set_diversity(synthetic, spec),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{FamilyTag, Provenance, VQARecord};
    use crate::synthworld::{build_corpus, generate_scene, make_numeric_split};

    fn world() -> Arc<WorldSpec> {
        Arc::new(WorldSpec::default_world())
    }

    fn test_split(n: usize, seed: u64) -> DatasetManifest {
        let (_, _, test) = build_corpus(&world(), 0, 0, n, seed).unwrap();
        test
    }

    fn record(id: &str, scene_seed: u64, question: &str, answer: &str) -> VQARecord {
        let spec = world();
        VQARecord {
            id: id.to_string(),
            scene_seed,
            style_tag: spec.style_tag.clone(),
            world_hash: spec.content_hash(),
            question: question.to_string(),
            answer: answer.to_string(),
            family: FamilyTag::generated(),
            provenance: Provenance::Real,
            group_id: None,
            generation: None,
        }
    }

    /// A seed whose scene misses at least one shape, plus that shape's word.
    fn scene_missing_a_shape() -> (u64, String) {
        let spec = world();
        for seed in 0.. {
            let scene = generate_scene(&spec, seed);
            let present: BTreeSet<usize> = scene.objects.iter().map(|o| o.shape).collect();
            if let Some(absent) = (0..spec.shape_vocab.len()).find(|s| !present.contains(s)) {
                return (seed, spec.shape_vocab[absent].clone());
            }
        }
        unreachable!("some scene misses some shape");
    }

    // ---- audit ----

    #[test]
    fn verbatim_oracle_records_audit_perfectly() {
        let spec = world();
        let split = test_split(40, 61);
        let report = pseudolabel_audit(&split, &spec).unwrap();
        assert_eq!(report.total.n, 40);
        assert_eq!(report.total.well_posed, 40);
        assert_eq!(report.total.answerable, 40);
        assert_eq!(report.total.answer_correct, 40);
        assert_eq!(report.total.answer_correct_rate(), 1.0);
        assert!(!report.per_family.contains_key(UNMATCHED_FAMILY));
    }

    #[test]
    fn absent_referents_are_well_posed_but_unanswerable() {
        let spec = world();
        let (seed, absent_shape) = scene_missing_a_shape();
        let question = format!("what color is the {absent_shape}");
        let split = DatasetManifest::new(
            "audit",
            vec![record("a-0", seed, &question, "red")],
        )
        .unwrap();
        let report = pseudolabel_audit(&split, &spec).unwrap();
        assert_eq!(report.total.well_posed, 1);
        assert_eq!(report.total.answerable, 0);
        assert_eq!(report.total.answer_correct, 0);
        assert_eq!(report.per_family["color-query"].well_posed, 1);
    }

    #[test]
    fn audit_counts_every_degradation_step() {
        let spec = world();
        let (absent_seed, absent_shape) = scene_missing_a_shape();
        let good = test_split(1, 62).records[0].clone();
        let mut wrong_answer = good.clone();
        wrong_answer.id = "a-wrong".to_string();
        wrong_answer.answer = "definitely not the answer".to_string();
        let split = DatasetManifest::new(
            "audit",
            vec![
                good,
                wrong_answer,
                record("a-absent", absent_seed, &format!("what color is the {absent_shape}"), "red"),
                record("a-junk", 3, "purple monkey dishwasher", "blue"),
            ],
        )
        .unwrap();
        let report = pseudolabel_audit(&split, &spec).unwrap();
        assert_eq!(report.total.n, 4);
        assert_eq!(report.total.well_posed, 3);
        assert_eq!(report.total.answerable, 2);
        assert_eq!(report.total.answer_correct, 1);
        assert_eq!(report.per_family[UNMATCHED_FAMILY].n, 1);
        assert_eq!(report.per_family[UNMATCHED_FAMILY].well_posed, 0);
    }

    #[test]
    fn audit_counts_nest_per_family_and_sum_to_the_total() {
        let spec = world();
        let split = test_split(50, 63);
        let report = pseudolabel_audit(&split, &spec).unwrap();
        let mut n = 0;
        for score in report.per_family.values() {
            assert!(score.well_posed <= score.n);
            assert!(score.answerable <= score.well_posed);
            assert!(score.answer_correct <= score.answerable);
            n += score.n;
        }
        assert_eq!(n, report.total.n);
    }

    #[test]
    fn audit_rejects_foreign_worlds_and_empty_splits() {
        let spec = world();
        let mut split = test_split(3, 64);
        split.records[0].world_hash = "feedfeedfeedfeed".to_string();
        let err = pseudolabel_audit(&split, &spec).unwrap_err();
        assert!(matches!(err, EvalError::WorldMismatch { .. }));

        let empty = DatasetManifest::new("none", Vec::new()).unwrap();
        let err = pseudolabel_audit(&empty, &spec).unwrap_err();
        assert!(matches!(err, EvalError::EmptySplit(_)));
    }

    // ---- diversity ----

    #[test]
    fn identical_question_sets_get_identical_statistics() {
        let spec = world();
        let split = test_split(30, 65);
        let report = question_diversity(&split, &split, &spec).unwrap();
        assert_eq!(report.real, report.synthetic);
        assert_eq!(report.real.n_questions, 30);
    }

    #[test]
    fn novel_questions_never_shrink_the_distinct_ngram_counts() {
        let spec = world();
        let real = test_split(30, 66);
        let numeric = make_numeric_split(&spec, 20, 67).unwrap();
        let mut union_records = real.records.clone();
        for (i, mut rec) in numeric.records.into_iter().enumerate() {
            rec.id = format!("extra-{i}");
            union_records.push(rec);
        }
        let union = DatasetManifest::new("union", union_records).unwrap();
        let report = question_diversity(&real, &union, &spec).unwrap();
        for order in 0..3 {
            assert!(
                report.synthetic.distinct_ngrams[order] >= report.real.distinct_ngrams[order],
                "order {order}: union must cover the base set's n-grams"
            );
        }
    }

    #[test]
    fn ratios_stay_in_the_unit_interval_and_name_the_same_thing() {
        let spec = world();
        let split = test_split(40, 68);
        let report = question_diversity(&split, &split, &spec).unwrap();
        for ratio in report.real.distinct_ngram_ratio {
            assert!((0.0..=1.0).contains(&ratio));
        }
        assert_eq!(report.real.type_token_ratio, report.real.distinct_ngram_ratio[0]);
    }

    #[test]
    fn detected_families_match_the_tags_on_oracle_records() {
        let spec = world();
        let split = test_split(40, 69);
        let report = question_diversity(&split, &split, &spec).unwrap();
        let mut tagged: BTreeMap<String, usize> = BTreeMap::new();
        for rec in &split.records {
            *tagged.entry(rec.family.to_string()).or_insert(0) += 1;
        }
        assert_eq!(report.real.family_distribution, tagged);
        let hist_total: usize = report.real.length_histogram.values().sum();
        assert_eq!(hist_total, 40);
    }

    #[test]
    fn empty_question_sets_are_rejected() {
        let spec = world();
        let split = test_split(5, 70);
        let empty = DatasetManifest::new("none", Vec::new()).unwrap();
        assert!(matches!(
            question_diversity(&split, &empty, &spec).unwrap_err(),
            EvalError::EmptySplit(name) if name == "none"
        ));
        assert!(matches!(
            question_diversity(&empty, &split, &spec).unwrap_err(),
            EvalError::EmptySplit(_)
        ));
    }
}
