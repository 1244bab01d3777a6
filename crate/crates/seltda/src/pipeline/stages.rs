//! The four self-training stages over dataset manifests: teacher training,
//! pool pseudolabeling, multiplier-policy merging, and student training.
//!
//! The stages compose left to right — `train_teacher` fits a question
//! generator on the real split, `pseudolabel_pool` samples and filters
//! synthetic records from an image pool, `merge_datasets` concatenates real
//! and synthetic under the multiplier policy, and `train_student` fits the
//! answering model on the merged split. The student always starts from the
//! shared pretrained initialization, never from the teacher; lineage tags on
//! checkpoints enforce that wiring.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoding::{decode_sequence, DecodingConfig, DecodingError};
use crate::model::{
    fit, Checkpoint, FitReport, Lineage, LossKind, ModelError, SequenceExample, TrainConfig,
    VocabError, Vocabulary, BOS,
};
use crate::seeding::stream_rng;
use crate::synthworld::{
    encode_scene, scene_for_record, ConfigError, ImagePool, ImageTensor, WorldSpec,
};
use crate::templating::{normalize_answer, parse_qa, serialize_qa, ParseOutcome, QAPair};

use super::records::{
    DatasetManifest, FamilyTag, GenerationMeta, Provenance, RecordError, VQARecord,
};

/// Anything a pipeline stage can fail with. Wrapped errors keep their
/// original message; the domain variants cover policy and wiring mistakes.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    World(#[from] ConfigError),
    #[error(transparent)]
    Decoding(#[from] DecodingError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    /// A stage was handed a checkpoint from the wrong point in the loop,
    /// e.g. a student initialized from the teacher.
    #[error("{stage} requires a {expected} checkpoint, got {got}")]
    WrongLineage { stage: &'static str, expected: &'static str, got: &'static str },
    /// A split that must be oracle-labeled contains a synthetic record.
    #[error("record {id:?} in the {split:?} split is not provenance=real")]
    UnexpectedSynthetic { split: String, id: String },
    /// A persisted record cannot be turned back into training tokens.
    #[error("record {id:?} cannot be prepared for training: {reason}")]
    MalformedRecord { id: String, reason: String },
    /// A record's image reference points at a different world than the one
    /// in hand, so its scene cannot be regenerated faithfully.
    #[error("record {id:?} was generated under a different world")]
    WorldHashMismatch { id: String },
    /// A checkpoint whose vocabulary disagrees with its output dimension.
    #[error("checkpoint vocabulary has {vocab} entries but the model emits {model}")]
    VocabDimensionMismatch { vocab: usize, model: usize },
    /// An [`AugmentationPolicy`] field is out of range, or the data in hand
    /// cannot satisfy the policy.
    #[error("augmentation policy violated: {reason}")]
    Policy { reason: String },
    /// Pseudolabeling ran out of retry budget before reaching its target
    /// (beyond the tolerated shortfall). The statistics survive the failure.
    #[error("pseudolabeling accepted {accepted} of {target} records within the retry budget")]
    InsufficientYield { target: usize, accepted: usize, stats: PseudolabelStats },
    /// An evaluation suite failed while a run was scoring its student.
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    /// Filesystem trouble while persisting or loading run artifacts.
    #[error("run io failed for {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    /// A persisted run manifest that cannot be parsed.
    #[error("manifest at {path} is malformed")]
    BadManifest {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    /// A run config file that cannot be parsed.
    #[error("config at {path} is not valid: {reason}")]
    BadConfig { path: String, reason: String },
    /// A manifest references an artifact whose on-disk bytes no longer
    /// match the recorded hash.
    #[error("artifact {name:?} at {path} does not match its recorded hash")]
    ArtifactMismatch { name: String, path: String },
}

/// Which images are offered to the pseudolabeler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageSource {
    /// Only the images behind the real labeled split (asking new questions
    /// about already-annotated images).
    LabeledImagesOnly,
    /// Only the dedicated unlabeled pool.
    UnlabeledPool,
    /// Labeled images plus the unlabeled pool.
    Mixed,
}

impl ImageSource {
    /// The kebab-case name used in configs, tables, and CSV exports.
    pub fn label(&self) -> &'static str {
        match self {
            ImageSource::LabeledImagesOnly => "labeled-images-only",
            ImageSource::UnlabeledPool => "unlabeled-pool",
            ImageSource::Mixed => "mixed",
        }
    }
}

impl fmt::Display for ImageSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// How much synthetic data to generate and how hard to try.
///
/// The multiplier is measured against the real split: after merging, total
/// records ≈ `multiplier × |real|`, i.e. the synthetic target is
/// `round((multiplier − 1) × |real|)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    /// Total-to-real ratio after merging; 1.0 disables augmentation.
    pub multiplier: f64,
    /// Cap on accepted records per image.
    pub questions_per_image: usize,
    pub image_source: ImageSource,
    /// Retry allowance per (image, slot); an image's total attempt budget
    /// is pooled as `questions_per_image × max_retries`.
    pub max_retries: usize,
    /// Fraction of the synthetic target that may go unmet without an error,
    /// both at generation time and at merge time.
    pub shortfall_tolerance: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            multiplier: 3.0,
            questions_per_image: 2,
            image_source: ImageSource::Mixed,
            max_retries: 4,
            shortfall_tolerance: 0.0,
        }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !self.multiplier.is_finite() || self.multiplier < 1.0 {
            return Err(PipelineError::Policy {
                reason: format!("multiplier must be a finite value ≥ 1, got {}", self.multiplier),
            });
        }
        if self.questions_per_image == 0 {
            return Err(PipelineError::Policy {
                reason: "questions_per_image must be at least 1".into(),
            });
        }
        if self.max_retries == 0 {
            return Err(PipelineError::Policy { reason: "max_retries must be at least 1".into() });
        }
        if !self.shortfall_tolerance.is_finite() || !(0.0..=1.0).contains(&self.shortfall_tolerance)
        {
            return Err(PipelineError::Policy {
                reason: format!(
                    "shortfall_tolerance must lie in [0, 1], got {}",
                    self.shortfall_tolerance
                ),
            });
        }
        Ok(())
    }

    /// Number of synthetic records needed on top of `real_count` real ones.
    pub fn synthetic_target(&self, real_count: usize) -> usize {
        ((self.multiplier - 1.0) * real_count as f64).round() as usize
    }

    /// Largest shortfall from `target` the policy tolerates.
    fn tolerated_shortfall(&self, target: usize) -> usize {
        (self.shortfall_tolerance * target as f64).floor() as usize
    }
}

/// Per-run pseudolabeling counters. Every generation lands in exactly one
/// of the four outcome buckets, so
/// `generated = accepted + parse_rejected + duplicate_rejected +
/// discarded_over_target`; `truncated` overlaps the others (a truncated
/// sample usually also fails to parse).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudolabelStats {
    pub generated: usize,
    pub accepted: usize,
    pub parse_rejected: usize,
    pub duplicate_rejected: usize,
    pub discarded_over_target: usize,
    /// Samples that hit the length cap before emitting a terminator.
    pub truncated: usize,
}

impl PseudolabelStats {
    /// Whether the outcome buckets account for every generation exactly.
    pub fn balances(&self) -> bool {
        self.generated
            == self.accepted + self.parse_rejected + self.duplicate_rejected
                + self.discarded_over_target
    }
}

// ---------------------------------------------------------------------------
// Manifest → training examples
// ---------------------------------------------------------------------------

/// Regenerates image tensors from (style tag, scene seed) references,
/// cached so records sharing a scene pay for one render.
struct ImageCache<'w> {
    spec: &'w Arc<WorldSpec>,
    rendered: BTreeMap<(String, u64), ImageTensor>,
}

impl<'w> ImageCache<'w> {
    fn new(spec: &'w Arc<WorldSpec>) -> Self {
        ImageCache { spec, rendered: BTreeMap::new() }
    }

    fn render(&mut self, style_tag: &str, scene_seed: u64) -> ImageTensor {
        let spec = self.spec;
        self.rendered
            .entry((style_tag.to_string(), scene_seed))
            .or_insert_with(|| encode_scene(&scene_for_record(spec, scene_seed, style_tag)))
            .clone()
    }
}

fn check_world(record: &VQARecord, expected_hash: &str) -> Result<(), PipelineError> {
    if record.world_hash != expected_hash {
        return Err(PipelineError::WorldHashMismatch { id: record.id.clone() });
    }
    Ok(())
}

/// Question-generation examples: the serialized QA string as the decoder
/// target, conditioned on the image alone.
pub fn generation_examples(
    spec: &Arc<WorldSpec>,
    vocab: &Vocabulary,
    manifest: &DatasetManifest,
) -> Result<Vec<SequenceExample>, PipelineError> {
    let expected_hash = spec.content_hash();
    let mut cache = ImageCache::new(spec);
    manifest
        .records
        .iter()
        .map(|record| {
            check_world(record, &expected_hash)?;
            let pair =
                QAPair::new(record.question.as_str(), record.answer.as_str()).map_err(|e| {
                    PipelineError::MalformedRecord { id: record.id.clone(), reason: e.to_string() }
                })?;
            let targets = vocab.tokenize(serialize_qa(&pair).as_str())?;
            Ok(SequenceExample {
                image: cache.render(&record.style_tag, record.scene_seed),
                question: None,
                targets,
            })
        })
        .collect()
}

/// Answering examples: the EOS-terminated answer as the decoder target,
/// conditioned on image plus question.
pub fn answering_examples(
    spec: &Arc<WorldSpec>,
    vocab: &Vocabulary,
    manifest: &DatasetManifest,
) -> Result<Vec<SequenceExample>, PipelineError> {
    let expected_hash = spec.content_hash();
    let mut cache = ImageCache::new(spec);
    manifest
        .records
        .iter()
        .map(|record| {
            check_world(record, &expected_hash)?;
            let question = vocab.tokenize(&record.question)?;
            let mut targets = vocab.tokenize(&record.answer)?;
            targets.push(crate::model::EOS);
            Ok(SequenceExample {
                image: cache.render(&record.style_tag, record.scene_seed),
                question: Some(question),
                targets,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

fn expect_lineage(
    stage: &'static str,
    checkpoint: &Checkpoint,
    expected: Lineage,
) -> Result<(), PipelineError> {
    if checkpoint.lineage != expected {
        return Err(PipelineError::WrongLineage {
            stage,
            expected: expected.label(),
            got: checkpoint.lineage.label(),
        });
    }
    Ok(())
}

fn expect_all_real(manifest: &DatasetManifest) -> Result<(), PipelineError> {
    if let Some(record) =
        manifest.records.iter().find(|r| r.provenance != Provenance::Real)
    {
        return Err(PipelineError::UnexpectedSynthetic {
            split: manifest.split.clone(),
            id: record.id.clone(),
        });
    }
    Ok(())
}

/// Fits the question-generation teacher on the real labeled split, starting
/// from the shared pretrained initialization. `init` is never mutated.
pub fn train_teacher(
    spec: &Arc<WorldSpec>,
    init: &Checkpoint,
    labeled: &DatasetManifest,
    config: &TrainConfig,
) -> Result<(Checkpoint, FitReport), PipelineError> {
    expect_lineage("train-teacher", init, Lineage::PretrainInit)?;
    expect_all_real(labeled)?;
    let examples = generation_examples(spec, &init.vocab, labeled)?;
    let mut params = init.params.clone();
    let report = fit(&mut params, LossKind::QuestionGeneration, &examples, config, "teacher")?;
    let checkpoint = Checkpoint {
        lineage: Lineage::Teacher,
        config_hash: init.config_hash.clone(),
        step: init.step + report.steps,
        vocab: init.vocab.clone(),
        params,
    };
    Ok((checkpoint, report))
}

/// Fits the answering student on a (possibly augmented) split. The student
/// must start from the pretrained initialization — handing it the teacher
/// checkpoint is rejected, to keep the self-training loop from collapsing
/// into fine-tuning the teacher on its own outputs.
pub fn train_student(
    spec: &Arc<WorldSpec>,
    pretrained: &Checkpoint,
    augmented: &DatasetManifest,
    config: &TrainConfig,
) -> Result<(Checkpoint, FitReport), PipelineError> {
    expect_lineage("train-student", pretrained, Lineage::PretrainInit)?;
    let examples = answering_examples(spec, &pretrained.vocab, augmented)?;
    let mut params = pretrained.params.clone();
    let report = fit(&mut params, LossKind::Answering, &examples, config, "student")?;
    let checkpoint = Checkpoint {
        lineage: Lineage::Student,
        config_hash: pretrained.config_hash.clone(),
        step: pretrained.step + report.steps,
        vocab: pretrained.vocab.clone(),
        params,
    };
    Ok((checkpoint, report))
}

/// A sample the teacher produced for one image, after parsing and the
/// per-record usability checks.
enum Candidate {
    Usable(QAPair),
    Unusable,
}

/// Parses one generation and checks that it can actually train the student:
/// the grammar must match, the question must fit the encoder's question
/// window, and the answer (plus terminator) must fit the decoder window.
fn classify_sample(text: &str, teacher: &Checkpoint) -> Candidate {
    let pair = match parse_qa(text) {
        ParseOutcome::Parsed(pair) => pair,
        ParseOutcome::Rejected(_) => return Candidate::Unusable,
    };
    let hyper = &teacher.params.hyper;
    let question_fits = teacher
        .vocab
        .tokenize(pair.question())
        .map(|t| t.len() <= hyper.max_question_len)
        .unwrap_or(false);
    let answer_fits = teacher
        .vocab
        .tokenize(pair.answer())
        .map(|t| t.len() < hyper.max_target_len)
        .unwrap_or(false);
    if question_fits && answer_fits {
        Candidate::Usable(pair)
    } else {
        Candidate::Unusable
    }
}

/// Samples question-answer pairs for pool images until the policy's
/// synthetic target is met, parsing and filtering each generation.
///
/// Each image gets its own RNG stream keyed on its id, so the accepted
/// records do not depend on pool order; images are processed in id order
/// and each contributes at most `questions_per_image` records within a
/// pooled budget of `questions_per_image × max_retries` attempts. Samples
/// that fail the grammar or would not fit the student's encoder/decoder
/// windows count as parse-rejected; repeats of an already-accepted question
/// on the same image count as duplicate-rejected; usable samples arriving
/// after the target is met count as discarded-over-target.
///
/// A yield within the policy's shortfall tolerance of the target is
/// returned as-is; a deeper shortfall is an [`PipelineError::InsufficientYield`].
pub fn pseudolabel_pool(
    teacher: &Checkpoint,
    pool: &ImagePool,
    policy: &AugmentationPolicy,
    dconf: &DecodingConfig,
    real_count: usize,
) -> Result<(DatasetManifest, PseudolabelStats), PipelineError> {
    policy.validate()?;
    dconf.validate()?;
    expect_lineage("pseudolabel", teacher, Lineage::Teacher)?;
    if teacher.vocab.len() != teacher.params.hyper.vocab_size {
        return Err(PipelineError::VocabDimensionMismatch {
            vocab: teacher.vocab.len(),
            model: teacher.params.hyper.vocab_size,
        });
    }

    let mut stats = PseudolabelStats::default();
    let target = policy.synthetic_target(real_count);
    if target == 0 {
        return Ok((DatasetManifest::new("synthetic", Vec::new())?, stats));
    }
    if pool.images.is_empty() {
        return Err(PipelineError::Policy {
            reason: "cannot pseudolabel an empty image pool".into(),
        });
    }
    let mut ids = BTreeSet::new();
    for image in &pool.images {
        if !ids.insert(image.image_id.as_str()) {
            return Err(PipelineError::Policy {
                reason: format!("duplicate image id {:?} in pool", image.image_id),
            });
        }
    }

    let spec = Arc::new(pool.world.clone());
    let world_hash = spec.content_hash();
    let mut images: Vec<_> = pool.images.iter().collect();
    images.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let budget = policy.questions_per_image * policy.max_retries;
    let mut records: Vec<VQARecord> = Vec::with_capacity(target);
    for image_ref in images {
        if records.len() >= target {
            break;
        }
        let image = encode_scene(&scene_for_record(&spec, image_ref.scene_seed, &image_ref.style_tag));
        let stream = format!("pseudolabel/{}", image_ref.image_id);
        let mut seen_questions = BTreeSet::new();
        let mut slots_filled = 0usize;
        for attempt in 0..budget {
            if slots_filled >= policy.questions_per_image {
                break;
            }
            let mut rng = stream_rng(&stream, &[dconf.seed, attempt as u64]);
            let decoded = decode_sequence(&teacher.params, &image, &[BOS], dconf, &mut rng)?;
            stats.generated += 1;
            if decoded.truncated {
                stats.truncated += 1;
            }
            let text = teacher.vocab.detokenize(&decoded.tokens);
            let pair = match classify_sample(&text, teacher) {
                Candidate::Usable(pair) => pair,
                Candidate::Unusable => {
                    stats.parse_rejected += 1;
                    continue;
                }
            };
            if !seen_questions.insert(normalize_answer(pair.question())) {
                stats.duplicate_rejected += 1;
                continue;
            }
            slots_filled += 1;
            if records.len() >= target {
                stats.discarded_over_target += 1;
                continue;
            }
            stats.accepted += 1;
            records.push(VQARecord {
                id: format!("syn-{}-{}", image_ref.image_id, slots_filled - 1),
                scene_seed: image_ref.scene_seed,
                style_tag: image_ref.style_tag.clone(),
                world_hash: world_hash.clone(),
                question: pair.question().to_string(),
                answer: pair.answer().to_string(),
                family: FamilyTag::generated(),
                provenance: Provenance::Synthetic,
                group_id: None,
                generation: Some(GenerationMeta {
                    top_p: dconf.top_p,
                    temperature: dconf.temperature,
                    rng_stream: format!("{stream}/{attempt}"),
                    parse_status: "parsed".to_string(),
                }),
            });
        }
    }

    if records.len() + policy.tolerated_shortfall(target) < target {
        return Err(PipelineError::InsufficientYield {
            target,
            accepted: records.len(),
            stats,
        });
    }
    Ok((DatasetManifest::new("synthetic", records)?, stats))
}

/// Concatenates the real split with synthetic records under the multiplier
/// policy: real records first, then synthetic in generation order, truncated
/// to the synthetic target. A shortfall beyond the policy's tolerance is an
/// error; surplus synthetic records are silently dropped.
pub fn merge_datasets(
    real: &DatasetManifest,
    synthetic: &DatasetManifest,
    policy: &AugmentationPolicy,
) -> Result<DatasetManifest, PipelineError> {
    policy.validate()?;
    expect_all_real(real)?;
    let target = policy.synthetic_target(real.records.len());
    let take = target.min(synthetic.records.len());
    let shortfall = target - take;
    if shortfall > policy.tolerated_shortfall(target) {
        return Err(PipelineError::Policy {
            reason: format!(
                "synthetic shortfall {shortfall} of target {target} exceeds the tolerated {}",
                policy.tolerated_shortfall(target)
            ),
        });
    }
    let mut records = real.records.clone();
    records.extend(synthetic.records.iter().take(take).cloned());
    Ok(DatasetManifest::new("augmented", records)?)
}
