//! One config in, a fully materialized run directory out.
//!
//! [`run_seltda`] drives the whole loop — corpus, caption pretraining,
//! teacher, pseudolabels, merge, student, evaluation — persisting every
//! artifact with a content hash and recording the lot in a [`RunManifest`].
//! Stage failures still persist a partial manifest naming the stage.
//! [`sweep`] repeats the run over a multiplier × seed grid — every child
//! shares the corpus, and the children of each seed share the pretrained
//! checkpoint and the teacher — and aggregates the results into an
//! ablation table.
//!
//! Everything is a pure function of the config, so rerunning with the same
//! config yields byte-identical datasets and an identical manifest content
//! hash (wall-clock timings are excluded from the hash).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::records::DatasetManifest;
use super::stages::{
    merge_datasets, pseudolabel_pool, train_student, train_teacher, AugmentationPolicy,
    ImageSource, PipelineError, PseudolabelStats,
};
use super::atomic_write;
use crate::decoding::DecodingConfig;
use crate::eval::{
    ablation_sweep_report, counterexample_eval, domain_generalization_eval, numeric_eval,
    pseudolabel_audit, question_diversity, rephrasing_consistency, self_agreement_probe,
    sweep_csv, vqa_accuracy, AblationTable, AgreementCurve, AuditReport, CheckpointAnswerer,
    ConsistencyReport, CounterexampleReport, DiversityReport, DomainReport, EvalError,
    EvalReport, NumericReport, SweepRunSummary,
};
use crate::model::{pretrain_init, Checkpoint, Lineage, TrainConfig};
use crate::seeding::derive_seed;
use crate::synthworld::{
    build_corpus_weighted, make_counterexample_split, make_numeric_split, make_rephrasing_split,
    make_shifted_domain, Family, FamilyWeights, ImagePool, PoolImage, WorldSpec,
};

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

/// Corpus sizes and the optional evaluation splits derived alongside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Seed for corpus generation, deliberately separate from the run seed:
    /// runs with different run seeds but the same corpus seed train on the
    /// same data, which is what makes multi-seed comparisons paired.
    pub seed: u64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    /// Family sampling weights for the labeled and test splits; uniform
    /// when absent.
    pub family_weights: Option<FamilyWeights>,
    /// Paraphrases per test question for the consistency suite; 0 skips it.
    pub rephrasing_k: usize,
    /// Counterexample records; built only when the world has a shortcut.
    pub n_counterexamples: usize,
    /// Count-only records for the numeric suite; 0 skips it.
    pub n_numeric: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 0,
            n_labeled: 2_000,
            n_unlabeled: 1_000,
            n_test: 500,
            family_weights: None,
            rephrasing_k: 2,
            n_counterexamples: 300,
            n_numeric: 300,
        }
    }
}

/// Caption pretraining: how many scenes to caption and how to train on them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub n_scenes: usize,
    pub train: TrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { n_scenes: 1_200, train: TrainConfig { epochs: 4, ..TrainConfig::default() } }
    }
}

/// Which evaluation suites a run executes after training its student.
/// Plain test accuracy always runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub rephrasing: bool,
    pub counterexample: bool,
    pub numeric: bool,
    pub domain_shift: bool,
    pub probe: bool,
    pub audit: bool,
    pub diversity: bool,
    /// Ascending top-p grid for the self-agreement probe.
    pub probe_grid: Vec<f64>,
    /// Images probed per grid point.
    pub probe_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            rephrasing: true,
            counterexample: true,
            numeric: true,
            domain_shift: true,
            probe: true,
            audit: true,
            diversity: true,
            probe_grid: vec![0.1, 0.5, 0.9, 0.95],
            probe_samples: 24,
        }
    }
}

/// Everything a run needs, in one serializable place. The TOML rendering of
/// this struct is the config file format the CLI reads and writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    pub world: WorldSpec,
    pub corpus: CorpusConfig,
    pub pretrain: PretrainConfig,
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    /// Sampling knobs for pseudolabel generation.
    pub decoding: DecodingConfig,
    pub augmentation: AugmentationPolicy,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            world: WorldSpec::default_world(),
            corpus: CorpusConfig::default(),
            pretrain: PretrainConfig::default(),
            teacher: TrainConfig { epochs: 8, ..TrainConfig::default() },
            student: TrainConfig { epochs: 6, ..TrainConfig::default() },
            decoding: DecodingConfig::default(),
            // The default corpus gives the mixed source a capacity of
            // (2000 + 1000) × 2 = 6000 synthetic records, which multiplier 4
            // needs in full; a 5% tolerance keeps the top of the sweep from
            // failing on the handful of images that exhaust their retries.
            augmentation: AugmentationPolicy {
                shortfall_tolerance: 0.05,
                ..AugmentationPolicy::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Validates the parts with range constraints; size fields are free.
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.world.validate()?;
        self.augmentation.validate()?;
        self.decoding.validate()?;
        if let Some(weights) = &self.corpus.family_weights {
            weights.validate()?;
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form; run ids and checkpoints carry
    /// a prefix of it so artifacts can be traced back to their config.
    pub fn content_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// The TOML rendering written to `config.toml` inside each run.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to toml")
    }

    /// Reads and parses a TOML config file.
    pub fn load_toml(path: &Path) -> Result<RunConfig, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|source| PipelineError::Io { path: path.display().to_string(), source })?;
        toml::from_str(&text).map_err(|e| PipelineError::BadConfig {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// Terminal state of a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "kebab-case")]
pub enum RunStatus {
    Complete,
    Failed { stage: String, error: String },
}

/// A persisted file, addressed relative to the run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    /// SHA-256 of the file bytes.
    pub sha256: String,
}

/// Wall-clock seconds spent in one stage. Excluded from the manifest
/// content hash, since only the artifacts are supposed to be reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// The complete record of one run: config snapshot, artifact hashes,
/// pseudolabel accounting, metrics, and timings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub seed: u64,
    pub multiplier: f64,
    pub image_source: ImageSource,
    pub config_hash: String,
    pub world_hash: String,
    pub config: RunConfig,
    pub status: RunStatus,
    /// Artifact name → file reference, e.g. `"labeled"`, `"student"`.
    pub artifacts: BTreeMap<String, ArtifactRef>,
    pub pseudolabels: Option<PseudolabelStats>,
    /// Provenance counts of the merged training set.
    pub real_records: usize,
    pub synthetic_records: usize,
    /// Flat evaluation metrics; the structured reports live in the
    /// `eval-report` artifact.
    pub metrics: BTreeMap<String, f64>,
    pub timings: Vec<StageTiming>,
}

impl RunManifest {
    fn skeleton(config: &RunConfig) -> RunManifest {
        let config_hash = config.content_hash();
        RunManifest {
            run_id: format!("run-{}", &config_hash[..12]),
            seed: config.seed,
            multiplier: config.augmentation.multiplier,
            image_source: config.augmentation.image_source,
            config_hash,
            world_hash: config.world.content_hash(),
            config: config.clone(),
            status: RunStatus::Failed {
                stage: "init".to_string(),
                error: "run did not start".to_string(),
            },
            artifacts: BTreeMap::new(),
            pseudolabels: None,
            real_records: 0,
            synthetic_records: 0,
            metrics: BTreeMap::new(),
            timings: Vec::new(),
        }
    }

    /// SHA-256 over the manifest with timings cleared, so two runs of the
    /// same config hash identically regardless of how long they took.
    pub fn content_hash(&self) -> String {
        let mut hashable = self.clone();
        hashable.timings.clear();
        sha256_hex(&serde_json::to_vec(&hashable).expect("manifest serializes"))
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let mut json = serde_json::to_string_pretty(self).expect("manifest serializes");
        json.push('\n');
        atomic_write(path, json.as_bytes())
            .map_err(|source| PipelineError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<RunManifest, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|source| PipelineError::Io { path: path.display().to_string(), source })?;
        serde_json::from_str(&text).map_err(|source| PipelineError::BadManifest {
            path: path.display().to_string(),
            source,
        })
    }

    /// Checks that every referenced artifact exists under `dir` and still
    /// matches its recorded hash.
    pub fn verify(&self, dir: &Path) -> Result<(), PipelineError> {
        for (name, artifact) in &self.artifacts {
            let path = dir.join(&artifact.path);
            let bytes = fs::read(&path)
                .map_err(|source| PipelineError::Io { path: path.display().to_string(), source })?;
            if sha256_hex(&bytes) != artifact.sha256 {
                return Err(PipelineError::ArtifactMismatch {
                    name: name.clone(),
                    path: artifact.path.clone(),
                });
            }
        }
        Ok(())
    }

    /// Collapses a completed run into a sweep row; `None` for failed runs
    /// or runs missing the headline metric.
    pub fn sweep_summary(&self) -> Option<SweepRunSummary> {
        if self.status != RunStatus::Complete {
            return None;
        }
        let accuracy = *self.metrics.get("test_accuracy")?;
        let corpus_hash = self.artifacts.get("labeled")?.sha256.clone();
        let mut extra_metrics = BTreeMap::new();
        for key in [
            "numeric_accuracy",
            "counterexample_accuracy",
            "counterexample_gap",
            "rephrasing_consistency",
            "domain_accuracy",
        ] {
            if let Some(value) = self.metrics.get(key) {
                extra_metrics.insert(key.to_string(), *value);
            }
        }
        Some(SweepRunSummary {
            run_id: self.run_id.clone(),
            seed: self.seed,
            multiplier: self.multiplier,
            image_source: self.image_source,
            real_count: self.real_records,
            synthetic_count: self.synthetic_records,
            corpus_hash,
            accuracy,
            extra_metrics,
        })
    }
}

/// Every structured evaluation report a run produced, persisted together
/// as the `eval-report` artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBundle {
    pub accuracy: EvalReport,
    pub rephrasing: Option<ConsistencyReport>,
    pub counterexample: Option<CounterexampleReport>,
    pub numeric: Option<NumericReport>,
    pub domain: Option<DomainReport>,
    pub probe: Option<AgreementCurve>,
    pub audit: Option<AuditReport>,
    pub diversity: Option<DiversityReport>,
}

// ---------------------------------------------------------------------------
// The run
// ---------------------------------------------------------------------------

/// Relative artifact paths inside a run directory. Shared by the writer
/// ([`run_seltda`]) and the reader ([`load_corpus_bundle`]).
const CONFIG_PATH: &str = "config.toml";
const LABELED_PATH: &str = "corpus/labeled.jsonl";
const POOL_PATH: &str = "corpus/pool.json";
const TEST_PATH: &str = "corpus/test.jsonl";
const REPHRASINGS_PATH: &str = "corpus/rephrasings.jsonl";
const COUNTEREXAMPLES_PATH: &str = "corpus/counterexamples.jsonl";
const NUMERIC_PATH: &str = "corpus/numeric.jsonl";
const SHIFTED_TEST_PATH: &str = "corpus/shifted-test.jsonl";
const PRETRAIN_PATH: &str = "checkpoints/pretrain-init.json";
const TEACHER_PATH: &str = "checkpoints/teacher.json";
const STUDENT_PATH: &str = "checkpoints/student.json";
const SYNTHETIC_PATH: &str = "synthetic.jsonl";
const AUGMENTED_PATH: &str = "augmented.jsonl";
const EVAL_REPORT_PATH: &str = "reports/eval.json";
const AGREEMENT_CURVE_PATH: &str = "reports/agreement-curve.json";

/// Every corpus split a run trains and evaluates on; a pure function of
/// (world, corpus config, eval selection), shared by every child of a
/// sweep.
#[derive(Debug, Clone)]
pub struct CorpusBundle {
    pub labeled: DatasetManifest,
    pub pool: ImagePool,
    pub test: DatasetManifest,
    pub rephrasings: Option<DatasetManifest>,
    pub counterexamples: Option<DatasetManifest>,
    pub numeric: Option<DatasetManifest>,
    /// The shifted world together with its test split; records regenerate
    /// against the shifted world, not the source world.
    pub shifted: Option<(WorldSpec, DatasetManifest)>,
}

/// Multiplier-independent intermediates, reused across a sweep's children.
/// The corpus is also run-seed-independent; pretrain and teacher are not.
#[derive(Default)]
struct StageCache {
    corpus: Option<CorpusBundle>,
    /// Pretrained checkpoint plus its (initial, final) caption loss.
    pretrain: Option<(Checkpoint, f64, Option<f64>)>,
    /// Teacher checkpoint plus its final training loss.
    teacher: Option<(Checkpoint, Option<f64>)>,
}

/// Executes the full loop into `out_dir`, creating it as needed.
///
/// On success the directory holds the config, all corpus splits, every
/// checkpoint, the synthetic and merged datasets, the evaluation reports,
/// and `manifest.json`. If a stage fails, the partial manifest is still
/// written with [`RunStatus::Failed`] naming the stage, and the error is
/// returned.
pub fn run_seltda(config: &RunConfig, out_dir: &Path) -> Result<RunManifest, PipelineError> {
    run_with_cache(config, out_dir, &mut StageCache::default())
}

fn run_with_cache(
    config: &RunConfig,
    out_dir: &Path,
    cache: &mut StageCache,
) -> Result<RunManifest, PipelineError> {
    config.validate()?;
    fs::create_dir_all(out_dir)
        .map_err(|source| PipelineError::Io { path: out_dir.display().to_string(), source })?;

    let mut manifest = RunManifest::skeleton(config);
    match execute(config, out_dir, cache, &mut manifest) {
        Ok(()) => {
            manifest.status = RunStatus::Complete;
            manifest.save(&out_dir.join("manifest.json"))?;
            Ok(manifest)
        }
        Err((stage, error)) => {
            manifest.status = RunStatus::Failed { stage, error: error.to_string() };
            manifest.save(&out_dir.join("manifest.json"))?;
            Err(error)
        }
    }
}

/// Runs one timed stage, attributing any error to the stage by name.
fn timed<T>(
    name: &'static str,
    timings: &mut Vec<StageTiming>,
    body: impl FnOnce() -> Result<T, PipelineError>,
) -> Result<T, (String, PipelineError)> {
    let start = Instant::now();
    let value = body().map_err(|e| (name.to_string(), e))?;
    timings.push(StageTiming { stage: name.to_string(), seconds: start.elapsed().as_secs_f64() });
    Ok(value)
}

/// Writes one artifact and records its hash under `name`.
fn persist(
    manifest: &mut RunManifest,
    out_dir: &Path,
    stage: &str,
    name: &str,
    rel_path: &str,
    bytes: &[u8],
) -> Result<(), (String, PipelineError)> {
    let path = out_dir.join(rel_path);
    atomic_write(&path, bytes)
        .map_err(|source| PipelineError::Io { path: path.display().to_string(), source })
        .map_err(|e| (stage.to_string(), e))?;
    manifest.artifacts.insert(
        name.to_string(),
        ArtifactRef { path: rel_path.to_string(), sha256: sha256_hex(bytes) },
    );
    Ok(())
}

fn checkpoint_bytes(checkpoint: &Checkpoint) -> Vec<u8> {
    serde_json::to_vec(checkpoint).expect("checkpoint serializes")
}

fn execute(
    config: &RunConfig,
    out_dir: &Path,
    cache: &mut StageCache,
    manifest: &mut RunManifest,
) -> Result<(), (String, PipelineError)> {
    let augmenting = config.augmentation.multiplier > 1.0;

    // ---- config ----
    persist(manifest, out_dir, "config", "config", CONFIG_PATH, config.to_toml().as_bytes())?;

    // ---- corpus ----
    let bundle = match &cache.corpus {
        Some(bundle) => bundle.clone(),
        None => {
            let bundle = timed("corpus", &mut manifest.timings, || build_run_corpus(config))?;
            cache.corpus = Some(bundle.clone());
            bundle
        }
    };
    persist(
        manifest,
        out_dir,
        "corpus",
        "labeled",
        LABELED_PATH,
        bundle.labeled.canonical_jsonl().as_bytes(),
    )?;
    persist(manifest, out_dir, "corpus", "test", TEST_PATH, bundle.test.canonical_jsonl().as_bytes())?;
    let mut pool_json = serde_json::to_string_pretty(&bundle.pool).expect("pool serializes");
    pool_json.push('\n');
    persist(manifest, out_dir, "corpus", "pool", POOL_PATH, pool_json.as_bytes())?;
    if let Some(split) = &bundle.rephrasings {
        persist(
            manifest,
            out_dir,
            "corpus",
            "rephrasings",
            REPHRASINGS_PATH,
            split.canonical_jsonl().as_bytes(),
        )?;
    }
    if let Some(split) = &bundle.counterexamples {
        persist(
            manifest,
            out_dir,
            "corpus",
            "counterexamples",
            COUNTEREXAMPLES_PATH,
            split.canonical_jsonl().as_bytes(),
        )?;
    }
    if let Some(split) = &bundle.numeric {
        persist(
            manifest,
            out_dir,
            "corpus",
            "numeric",
            NUMERIC_PATH,
            split.canonical_jsonl().as_bytes(),
        )?;
    }
    if let Some((_, split)) = &bundle.shifted {
        persist(
            manifest,
            out_dir,
            "corpus",
            "shifted-test",
            SHIFTED_TEST_PATH,
            split.canonical_jsonl().as_bytes(),
        )?;
    }

    // ---- pretrain ----
    let (init, pretrain_initial, pretrain_final) = match &cache.pretrain {
        Some(cached) => cached.clone(),
        None => {
            let built = timed("pretrain", &mut manifest.timings, || pretrain_stage(config))?;
            cache.pretrain = Some(built.clone());
            built
        }
    };
    persist(manifest, out_dir, "pretrain", "pretrain-init", PRETRAIN_PATH, &checkpoint_bytes(&init))?;
    manifest.metrics.insert("pretrain_initial_loss".to_string(), pretrain_initial);
    if let Some(loss) = pretrain_final {
        manifest.metrics.insert("pretrain_final_loss".to_string(), loss);
    }

    // ---- teacher + pseudolabels (skipped entirely at multiplier 1) ----
    let mut synthetic: Option<DatasetManifest> = None;
    if augmenting {
        let (teacher, teacher_loss) = match &cache.teacher {
            Some(cached) => cached.clone(),
            None => {
                let built = timed("teacher", &mut manifest.timings, || {
                    teacher_stage(config, &init, &bundle.labeled)
                })?;
                cache.teacher = Some(built.clone());
                built
            }
        };
        persist(manifest, out_dir, "teacher", "teacher", TEACHER_PATH, &checkpoint_bytes(&teacher))?;
        if let Some(loss) = teacher_loss {
            manifest.metrics.insert("teacher_final_loss".to_string(), loss);
        }

        let (generated, stats) = timed("pseudolabel", &mut manifest.timings, || {
            pseudolabel_stage(config, &teacher, &bundle.labeled, &bundle.pool)
        })?;
        manifest.pseudolabels = Some(stats);
        persist(
            manifest,
            out_dir,
            "pseudolabel",
            "synthetic",
            SYNTHETIC_PATH,
            generated.canonical_jsonl().as_bytes(),
        )?;
        synthetic = Some(generated);
    }

    // ---- merge ----
    let augmented = timed("merge", &mut manifest.timings, || {
        let empty = DatasetManifest::new("synthetic", Vec::new()).expect("empty split is valid");
        merge_datasets(&bundle.labeled, synthetic.as_ref().unwrap_or(&empty), &config.augmentation)
    })?;
    manifest.real_records = augmented.real_count;
    manifest.synthetic_records = augmented.synthetic_count;
    persist(
        manifest,
        out_dir,
        "merge",
        "augmented",
        AUGMENTED_PATH,
        augmented.canonical_jsonl().as_bytes(),
    )?;

    // ---- student ----
    let (student, student_loss) = timed("student", &mut manifest.timings, || {
        student_stage(config, &init, &augmented)
    })?;
    persist(manifest, out_dir, "student", "student", STUDENT_PATH, &checkpoint_bytes(&student))?;
    if let Some(loss) = student_loss {
        manifest.metrics.insert("student_final_loss".to_string(), loss);
    }

    // ---- eval ----
    let eval_bundle = timed("eval", &mut manifest.timings, || {
        evaluate_student(
            config,
            &bundle,
            Some(&init),
            &student,
            synthetic.as_ref(),
            &mut manifest.metrics,
        )
    })?;
    let mut eval_json = serde_json::to_string_pretty(&eval_bundle).expect("reports serialize");
    eval_json.push('\n');
    persist(manifest, out_dir, "eval", "eval-report", EVAL_REPORT_PATH, eval_json.as_bytes())?;
    if let Some(curve) = &eval_bundle.probe {
        let mut curve_json = serde_json::to_string_pretty(curve).expect("curve serializes");
        curve_json.push('\n');
        persist(
            manifest,
            out_dir,
            "eval",
            "agreement-curve",
            AGREEMENT_CURVE_PATH,
            curve_json.as_bytes(),
        )?;
    }

    Ok(())
}

/// Builds every corpus split a run needs, honoring the eval selection.
/// Everything here depends on the corpus seed, not the run seed, so two
/// runs that differ only in training randomness see identical data.
pub fn build_run_corpus(config: &RunConfig) -> Result<CorpusBundle, PipelineError> {
    let spec = Arc::new(config.world.clone());
    let spec = &spec;
    let weights = config.corpus.family_weights.clone().unwrap_or_default();
    let corpus_seed = derive_seed("run/corpus", &[config.corpus.seed]);
    let (labeled, pool, test) = build_corpus_weighted(
        spec,
        config.corpus.n_labeled,
        config.corpus.n_unlabeled,
        config.corpus.n_test,
        corpus_seed,
        &weights,
    )?;

    let rephrasings = if config.eval.rephrasing && config.corpus.rephrasing_k > 0 && !test.is_empty()
    {
        Some(make_rephrasing_split(spec, &test, config.corpus.rephrasing_k)?)
    } else {
        None
    };

    let counterexamples = if config.eval.counterexample
        && config.corpus.n_counterexamples > 0
        && config.world.shortcut_bias > 0.5
    {
        let ce_seed = derive_seed("run/counterexample", &[config.corpus.seed]);
        Some(make_counterexample_split(spec, config.corpus.n_counterexamples, ce_seed)?)
    } else {
        None
    };

    let numeric = if config.eval.numeric && config.corpus.n_numeric > 0 {
        let numeric_seed = derive_seed("run/numeric", &[config.corpus.seed]);
        Some(make_numeric_split(spec, config.corpus.n_numeric, numeric_seed)?)
    } else {
        None
    };

    let shifted = if config.eval.domain_shift && config.corpus.n_test > 0 {
        let shifted_world = make_shifted_domain(&config.world);
        let shifted_spec = Arc::new(shifted_world.clone());
        let shifted_seed = derive_seed("run/shifted", &[config.corpus.seed]);
        let (_, _, shifted_test) =
            build_corpus_weighted(&shifted_spec, 0, 0, config.corpus.n_test, shifted_seed, &weights)?;
        let renamed = DatasetManifest::new("shifted-test", shifted_test.records)
            .expect("renaming a valid split keeps it valid");
        Some((shifted_world, renamed))
    } else {
        None
    };

    Ok(CorpusBundle { labeled, pool, test, rephrasings, counterexamples, numeric, shifted })
}

/// Reads a previously written corpus bundle back from a run directory,
/// honoring the same eval selection [`build_run_corpus`] uses to decide
/// which splits exist. Optional splits whose files are absent load as
/// `None` rather than erroring, so a bundle written under a narrower
/// selection is still usable.
pub fn load_corpus_bundle(config: &RunConfig, dir: &Path) -> Result<CorpusBundle, PipelineError> {
    let read_split = |rel: &str, name: &str| -> Result<DatasetManifest, PipelineError> {
        DatasetManifest::load_jsonl(&dir.join(rel), name).map_err(PipelineError::from)
    };
    let optional_split = |rel: &str, name: &str| -> Result<Option<DatasetManifest>, PipelineError> {
        if dir.join(rel).exists() { read_split(rel, name).map(Some) } else { Ok(None) }
    };

    let labeled = read_split(LABELED_PATH, "labeled")?;
    let test = read_split(TEST_PATH, "test")?;
    let pool_path = dir.join(POOL_PATH);
    let pool_json = std::fs::read_to_string(&pool_path)
        .map_err(|source| PipelineError::Io { path: pool_path.display().to_string(), source })?;
    let pool: ImagePool = serde_json::from_str(&pool_json).map_err(|source| {
        PipelineError::BadManifest { path: pool_path.display().to_string(), source }
    })?;

    let rephrasings = if config.eval.rephrasing {
        optional_split(REPHRASINGS_PATH, "test-rephrasings")?
    } else {
        None
    };
    let counterexamples = if config.eval.counterexample {
        optional_split(COUNTEREXAMPLES_PATH, "counterexample")?
    } else {
        None
    };
    let numeric =
        if config.eval.numeric { optional_split(NUMERIC_PATH, "numeric")? } else { None };
    let shifted = if config.eval.domain_shift {
        optional_split(SHIFTED_TEST_PATH, "shifted-test")?
            .map(|split| (make_shifted_domain(&config.world), split))
    } else {
        None
    };

    Ok(CorpusBundle { labeled, pool, test, rephrasings, counterexamples, numeric, shifted })
}

/// Trains the caption-grounded initialization that every teacher and
/// student starts from. Returns the checkpoint together with the initial
/// and final caption losses.
pub fn pretrain_stage(config: &RunConfig) -> Result<(Checkpoint, f64, Option<f64>), PipelineError> {
    let spec = Arc::new(config.world.clone());
    // The checkpoint is tagged with a hash of exactly what determines its
    // weights — world, pretrain config, run seed — not the full config, so
    // sweep children that share the checkpoint share it byte for byte.
    let scope_hash = pretrain_scope_hash(config);
    let train = TrainConfig {
        seed: derive_seed("run/pretrain", &[config.seed, config.pretrain.train.seed]),
        ..config.pretrain.train.clone()
    };
    let outcome = pretrain_init(&spec, &train, config.pretrain.n_scenes, train.seed)?;
    let checkpoint = Checkpoint {
        lineage: Lineage::PretrainInit,
        config_hash: scope_hash,
        step: outcome.report.steps,
        vocab: outcome.vocab,
        params: outcome.params,
    };
    Ok((checkpoint, outcome.initial_loss, outcome.report.final_loss()))
}

/// Fine-tunes the pretrained checkpoint into a question-generation teacher
/// on the labeled split. Returns the checkpoint and its final loss.
pub fn teacher_stage(
    config: &RunConfig,
    init: &Checkpoint,
    labeled: &DatasetManifest,
) -> Result<(Checkpoint, Option<f64>), PipelineError> {
    let spec = Arc::new(config.world.clone());
    let train = TrainConfig {
        seed: derive_seed("run/teacher", &[config.seed, config.teacher.seed]),
        ..config.teacher.clone()
    };
    let (checkpoint, report) = train_teacher(&spec, init, labeled, &train)?;
    Ok((checkpoint, report.final_loss()))
}

/// Samples question–answer pairs from the teacher over the images the
/// configured source offers, up to the augmentation target.
pub fn pseudolabel_stage(
    config: &RunConfig,
    teacher: &Checkpoint,
    labeled: &DatasetManifest,
    pool: &ImagePool,
) -> Result<(DatasetManifest, PseudolabelStats), PipelineError> {
    let decoding = DecodingConfig {
        seed: derive_seed("run/pseudolabel", &[config.seed, config.decoding.seed]),
        ..config.decoding.clone()
    };
    let generation_pool =
        assemble_pool(config.augmentation.image_source, labeled, pool, &config.world);
    pseudolabel_pool(teacher, &generation_pool, &config.augmentation, &decoding, labeled.len())
}

/// Fine-tunes the pretrained checkpoint into an answering student on the
/// merged split. Returns the checkpoint and its final loss.
pub fn student_stage(
    config: &RunConfig,
    init: &Checkpoint,
    augmented: &DatasetManifest,
) -> Result<(Checkpoint, Option<f64>), PipelineError> {
    let spec = Arc::new(config.world.clone());
    let train = TrainConfig {
        seed: derive_seed("run/student", &[config.seed, config.student.seed]),
        ..config.student.clone()
    };
    let (checkpoint, report) = train_student(&spec, init, augmented, &train)?;
    Ok((checkpoint, report.final_loss()))
}

/// Hash over the fields that determine the pretrained weights. Teacher and
/// student checkpoints inherit it, so every checkpoint of a (seed, world,
/// pretrain) scope traces back to the same initialization regardless of
/// the augmentation settings in force when it was written.
fn pretrain_scope_hash(config: &RunConfig) -> String {
    #[derive(Serialize)]
    struct Scope<'a> {
        world: &'a WorldSpec,
        pretrain: &'a PretrainConfig,
        seed: u64,
    }
    let scope = Scope { world: &config.world, pretrain: &config.pretrain, seed: config.seed };
    sha256_hex(&serde_json::to_vec(&scope).expect("scope serializes"))
}

/// The images a given source offers for pseudolabeling (or probing).
fn assemble_pool(
    source: ImageSource,
    labeled: &DatasetManifest,
    pool: &ImagePool,
    world: &WorldSpec,
) -> ImagePool {
    let labeled_images = || {
        labeled
            .records
            .iter()
            .map(|r| PoolImage {
                image_id: r.id.clone(),
                scene_seed: r.scene_seed,
                style_tag: r.style_tag.clone(),
            })
            .collect::<Vec<_>>()
    };
    let images = match source {
        ImageSource::LabeledImagesOnly => labeled_images(),
        ImageSource::UnlabeledPool => pool.images.clone(),
        ImageSource::Mixed => {
            let mut images = labeled_images();
            images.extend(pool.images.iter().cloned());
            images
        }
    };
    ImagePool { world: world.clone(), images }
}

/// Runs the selected evaluation suites against the student and fills the
/// flat metrics map. The self-agreement probe needs the pretrained
/// initialization for its captioner and is skipped when `init` is absent.
pub fn evaluate_student(
    config: &RunConfig,
    bundle: &CorpusBundle,
    init: Option<&Checkpoint>,
    student: &Checkpoint,
    synthetic: Option<&DatasetManifest>,
    metrics: &mut BTreeMap<String, f64>,
) -> Result<EvalBundle, PipelineError> {
    let spec = &Arc::new(config.world.clone());
    let mut answerer = CheckpointAnswerer::new(student.clone(), Arc::clone(spec), "student");

    let accuracy = vqa_accuracy(&mut answerer, &bundle.test)?;
    metrics.insert("test_accuracy".to_string(), accuracy.accuracy);

    let rephrasing = match &bundle.rephrasings {
        Some(split) if !split.is_empty() => {
            let report = rephrasing_consistency(&mut answerer, split)?;
            metrics.insert("rephrasing_accuracy".to_string(), report.mean_accuracy);
            metrics.insert("rephrasing_consistency".to_string(), report.group_consistency);
            Some(report)
        }
        _ => None,
    };

    let counterexample = match &bundle.counterexamples {
        Some(split) => {
            let matched_records: Vec<_> = bundle
                .test
                .records
                .iter()
                .filter(|r| r.family.known() == Some(Family::ColorQuery))
                .cloned()
                .collect();
            if matched_records.is_empty() {
                None
            } else {
                let matched = DatasetManifest::new("test-color-only", matched_records)
                    .expect("filtered split keeps unique ids");
                let report = counterexample_eval(&mut answerer, split, &matched)?;
                metrics
                    .insert("counterexample_accuracy".to_string(), report.counterexample.accuracy);
                metrics.insert("matched_color_accuracy".to_string(), report.matched.accuracy);
                metrics.insert("counterexample_gap".to_string(), report.gap);
                Some(report)
            }
        }
        None => None,
    };

    let numeric = match &bundle.numeric {
        Some(split) => {
            let report = numeric_eval(&mut answerer, split)?;
            metrics.insert("numeric_accuracy".to_string(), report.report.accuracy);
            Some(report)
        }
        None => None,
    };

    let domain = match &bundle.shifted {
        Some((shifted_world, split)) => {
            let mut shifted_answerer = CheckpointAnswerer::new(
                student.clone(),
                Arc::new(shifted_world.clone()),
                "student",
            );
            let report = domain_generalization_eval(&mut shifted_answerer, split, &config.world)?;
            metrics.insert("domain_accuracy".to_string(), report.full.accuracy);
            if let Some(shared) = &report.shared_vocab {
                metrics.insert("domain_shared_vocab_accuracy".to_string(), shared.accuracy);
            }
            Some(report)
        }
        None => None,
    };

    let probe = if let (true, Some(init)) = (config.eval.probe, init) {
        let probe_pool = if bundle.pool.is_empty() {
            assemble_pool(ImageSource::LabeledImagesOnly, &bundle.labeled, &bundle.pool, &config.world)
        } else {
            bundle.pool.clone()
        };
        if probe_pool.is_empty() {
            None
        } else {
            let probe_seed = derive_seed("run/probe", &[config.seed]);
            match self_agreement_probe(
                init,
                student,
                &probe_pool,
                &config.eval.probe_grid,
                config.eval.probe_samples,
                probe_seed,
            ) {
                Ok(curve) => {
                    metrics.insert("probe_slope".to_string(), curve.slope());
                    Some(curve)
                }
                // A probe that cannot measure anything is reported, not
                // fatal: the student trained fine, it just answers the
                // yes/no confirmations off-format.
                Err(EvalError::DegenerateProbe { .. } | EvalError::NoUsableProbes(_)) => {
                    metrics.insert("probe_degenerate".to_string(), 1.0);
                    None
                }
                Err(other) => return Err(other.into()),
            }
        }
    } else {
        None
    };

    let audit = match synthetic {
        Some(split) if config.eval.audit && !split.is_empty() => {
            let report = pseudolabel_audit(split, spec)?;
            metrics.insert("audit_well_posed_rate".to_string(), report.total.well_posed_rate());
            metrics.insert("audit_answerable_rate".to_string(), report.total.answerable_rate());
            metrics
                .insert("audit_answer_correct_rate".to_string(), report.total.answer_correct_rate());
            Some(report)
        }
        _ => None,
    };

    let diversity = match synthetic {
        Some(split) if config.eval.diversity && !split.is_empty() && !bundle.labeled.is_empty() => {
            let report = question_diversity(&bundle.labeled, split, &config.world)?;
            metrics.insert("diversity_real_ttr".to_string(), report.real.type_token_ratio);
            metrics
                .insert("diversity_synthetic_ttr".to_string(), report.synthetic.type_token_ratio);
            Some(report)
        }
        _ => None,
    };

    Ok(EvalBundle {
        accuracy,
        rephrasing,
        counterexample,
        numeric,
        domain,
        probe,
        audit,
        diversity,
    })
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// The aggregate view of a finished sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    /// Child manifests, seed-major in execution order.
    pub manifests: Vec<RunManifest>,
    /// One row per child, sorted by (multiplier, seed).
    pub summaries: Vec<SweepRunSummary>,
    pub table: AblationTable,
}

/// Runs the full loop once per (multiplier, seed) pair under `out_dir`.
///
/// Every child trains on the same corpus (it depends only on the corpus
/// seed), and the children of one run seed additionally share the
/// pretrained checkpoint and the teacher, since neither depends on the
/// multiplier. Each child still persists its own complete run directory,
/// so any child can be inspected or re-verified on its own. The multiplier
/// grid must include 1.0 — the ablation is measured against that baseline.
pub fn sweep(
    base: &RunConfig,
    multipliers: &[f64],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<SweepOutcome, PipelineError> {
    if multipliers.is_empty() || seeds.is_empty() {
        return Err(PipelineError::Policy {
            reason: "a sweep needs at least one multiplier and one seed".to_string(),
        });
    }
    fs::create_dir_all(out_dir)
        .map_err(|source| PipelineError::Io { path: out_dir.display().to_string(), source })?;

    let mut manifests = Vec::with_capacity(multipliers.len() * seeds.len());
    let mut shared_corpus: Option<CorpusBundle> = None;
    for &seed in seeds {
        let mut cache = StageCache { corpus: shared_corpus.take(), ..StageCache::default() };
        for &multiplier in multipliers {
            let mut child = base.clone();
            child.seed = seed;
            child.augmentation.multiplier = multiplier;
            let child_dir = out_dir.join(run_dir_name(multiplier, seed));
            manifests.push(run_with_cache(&child, &child_dir, &mut cache)?);
        }
        shared_corpus = cache.corpus.take();
    }

    let mut summaries: Vec<SweepRunSummary> =
        manifests.iter().map(|m| m.sweep_summary().expect("completed runs summarize")).collect();
    sort_summaries(&mut summaries);
    let table = ablation_sweep_report(&summaries)?;

    let mut summaries_json =
        serde_json::to_string_pretty(&summaries).expect("summaries serialize");
    summaries_json.push('\n');
    write_sweep_file(out_dir, "summaries.json", summaries_json.as_bytes())?;
    write_sweep_file(out_dir, "runs.csv", sweep_csv(&summaries).as_bytes())?;
    write_sweep_file(out_dir, "table.txt", table.to_text().as_bytes())?;
    let mut table_json = serde_json::to_string_pretty(&table).expect("table serializes");
    table_json.push('\n');
    write_sweep_file(out_dir, "table.json", table_json.as_bytes())?;

    Ok(SweepOutcome { manifests, summaries, table })
}

fn write_sweep_file(out_dir: &Path, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
    let path = out_dir.join(name);
    atomic_write(&path, bytes)
        .map_err(|source| PipelineError::Io { path: path.display().to_string(), source })
}

/// Child directory name, e.g. `m1.5-s3`.
fn run_dir_name(multiplier: f64, seed: u64) -> String {
    format!("m{multiplier}-s{seed}")
}

fn sort_summaries(summaries: &mut [SweepRunSummary]) {
    summaries.sort_by(|a, b| {
        (a.multiplier.to_bits(), a.seed, &a.run_id).cmp(&(b.multiplier.to_bits(), b.seed, &b.run_id))
    });
}

/// Loads the sweep rows back out of a directory of run directories by
/// scanning for `manifest.json` files one level down. Failed or partial
/// runs are skipped. Useful for re-reporting a sweep after the fact.
pub fn collect_run_summaries(dir: &Path) -> Result<Vec<SweepRunSummary>, PipelineError> {
    let entries = fs::read_dir(dir)
        .map_err(|source| PipelineError::Io { path: dir.display().to_string(), source })?;
    let mut summaries = Vec::new();
    for entry in entries {
        let entry =
            entry.map_err(|source| PipelineError::Io { path: dir.display().to_string(), source })?;
        let manifest_path = entry.path().join("manifest.json");
        if manifest_path.is_file() {
            if let Some(summary) = RunManifest::load(&manifest_path)?.sweep_summary() {
                summaries.push(summary);
            }
        }
    }
    sort_summaries(&mut summaries);
    Ok(summaries)
}

fn sha256_hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    let digest = Sha256::digest(bytes);
    let mut hex = String::with_capacity(64);
    for byte in digest {
        write!(hex, "{byte:02x}").expect("hex digest");
    }
    hex
}
