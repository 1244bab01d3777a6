//! Corpus builders: labeled/unlabeled/test splits plus the targeted
//! evaluation splits (rephrasings, counterexamples, counting).
//!
//! Every record stores only a scene seed and style tag; scenes are
//! regenerated on demand. All builders are pure functions of
//! (world, counts, seed), which is what makes reruns byte-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::templates::{
    answer_parsed, draw_question, match_question, render_question, Family, OracleOutcome,
    ParsedQuestion, ALL_FAMILIES, PARAPHRASES_PER_FAMILY,
};
use super::{generate_scene, ConfigError, SceneGraph, WorldSpec};
use crate::pipeline::records::{DatasetManifest, FamilyTag, Provenance, VQARecord};
use crate::seeding::{derive_seed, stream_rng};

/// Suffix appended to a record's style tag when its scene must be rebuilt
/// with the shortcut correlation inverted.
pub const COUNTEREXAMPLE_TAG_SUFFIX: &str = "#counterexample";

/// Attempts per record before giving up on finding an answerable question.
const QUESTION_ATTEMPTS: usize = 64;

// ---------------------------------------------------------------------------
// Family weights
// ---------------------------------------------------------------------------

/// Sampling weights over question families. Weights are relative; they do
/// not need to sum to 1. A family that cannot produce an answerable question
/// for a given scene is simply redrawn, so realized corpus fractions can
/// drift slightly above the nominal weight share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FamilyWeights(BTreeMap<Family, f64>);

impl FamilyWeights {
    /// Equal weight on every family.
    pub fn uniform() -> FamilyWeights {
        FamilyWeights(ALL_FAMILIES.iter().map(|&f| (f, 1.0)).collect())
    }

    /// Validates that weights are finite, non-negative, and not all zero.
    /// Families absent from the map get weight 0.
    pub fn new(weights: BTreeMap<Family, f64>) -> Result<FamilyWeights, ConfigError> {
        let mut total = 0.0;
        for &w in weights.values() {
            if !w.is_finite() || w < 0.0 {
                return Err(ConfigError::DegenerateFamilyWeights);
            }
            total += w;
        }
        if total <= 0.0 {
            return Err(ConfigError::DegenerateFamilyWeights);
        }
        Ok(FamilyWeights(weights))
    }

    pub fn weight(&self, family: Family) -> f64 {
        self.0.get(&family).copied().unwrap_or(0.0)
    }

    /// Re-runs the constructor checks, for weights that arrived via
    /// deserialization rather than [`FamilyWeights::new`].
    pub fn validate(&self) -> Result<(), ConfigError> {
        FamilyWeights::new(self.0.clone()).map(|_| ())
    }

    /// Draws one family by inverse CDF over the fixed family order.
    fn sample(&self, rng: &mut ChaCha8Rng) -> Family {
        let total: f64 = ALL_FAMILIES.iter().map(|&f| self.weight(f)).sum();
        let mut u = rng.gen::<f64>() * total;
        for family in ALL_FAMILIES {
            u -= self.weight(family);
            if u < 0.0 {
                return family;
            }
        }
        // Only reachable through accumulated rounding at u ≈ total.
        *ALL_FAMILIES
            .iter()
            .rev()
            .find(|&&f| self.weight(f) > 0.0)
            .expect("validated weights have a positive entry")
    }
}

impl Default for FamilyWeights {
    fn default() -> Self {
        FamilyWeights::uniform()
    }
}

// ---------------------------------------------------------------------------
// Image pool
// ---------------------------------------------------------------------------

/// One regenerable image in a pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolImage {
    pub image_id: String,
    pub scene_seed: u64,
    pub style_tag: String,
}

/// A set of images without labels, stored as scene seeds plus the world
/// they are interpreted under — tensors are never persisted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePool {
    pub world: WorldSpec,
    pub images: Vec<PoolImage>,
}

impl ImagePool {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn save_json(&self, path: &Path) -> std::io::Result<()> {
        let mut json = serde_json::to_string_pretty(self).expect("pool serializes");
        json.push('\n');
        crate::pipeline::atomic_write(path, json.as_bytes())
    }

    pub fn load_json(path: &Path) -> Result<ImagePool, std::io::Error> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }
}

// ---------------------------------------------------------------------------
// Seed allocation
// ---------------------------------------------------------------------------

/// Hands out scene seeds for `corpus/<split>` streams, salting on the rare
/// collision so labeled/unlabeled/test image sets stay pairwise disjoint.
struct SeedAllocator {
    run_seed: u64,
    used: BTreeSet<u64>,
}

impl SeedAllocator {
    fn new(run_seed: u64) -> SeedAllocator {
        SeedAllocator { run_seed, used: BTreeSet::new() }
    }

    fn next(&mut self, split: &str, idx: u64) -> u64 {
        let label = format!("corpus/{split}");
        for salt in 0u64.. {
            let seed = derive_seed(&label, &[self.run_seed, idx, salt]);
            if self.used.insert(seed) {
                return seed;
            }
        }
        unreachable!("2^64 salts cannot all collide");
    }
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

/// Builds the standard three-way corpus with uniform family weights:
/// an oracle-labeled training split, an unlabeled image pool, and a test
/// split, pairwise disjoint by scene seed.
pub fn build_corpus(
    spec: &Arc<WorldSpec>,
    n_labeled: usize,
    n_unlabeled: usize,
    n_test: usize,
    seed: u64,
) -> Result<(DatasetManifest, ImagePool, DatasetManifest), ConfigError> {
    build_corpus_weighted(spec, n_labeled, n_unlabeled, n_test, seed, &FamilyWeights::uniform())
}

/// [`build_corpus`] with explicit family weights for the labeled and test
/// splits (e.g. to starve the corpus of count questions).
pub fn build_corpus_weighted(
    spec: &Arc<WorldSpec>,
    n_labeled: usize,
    n_unlabeled: usize,
    n_test: usize,
    seed: u64,
    weights: &FamilyWeights,
) -> Result<(DatasetManifest, ImagePool, DatasetManifest), ConfigError> {
    spec.validate()?;
    weights.validate()?;
    let mut seeds = SeedAllocator::new(seed);

    let labeled = labeled_split(spec, "labeled", "lab", n_labeled, seed, weights, &mut seeds)?;

    let images = (0..n_unlabeled as u64)
        .map(|idx| PoolImage {
            image_id: format!("unl-{idx:06}"),
            scene_seed: seeds.next("unlabeled", idx),
            style_tag: spec.style_tag.clone(),
        })
        .collect();
    let pool = ImagePool { world: (**spec).clone(), images };

    let test = labeled_split(spec, "test", "tst", n_test, seed, weights, &mut seeds)?;
    Ok((labeled, pool, test))
}

/// Generates one oracle-labeled split.
fn labeled_split(
    spec: &Arc<WorldSpec>,
    split: &str,
    id_prefix: &str,
    n: usize,
    seed: u64,
    weights: &FamilyWeights,
    seeds: &mut SeedAllocator,
) -> Result<DatasetManifest, ConfigError> {
    let mut records = Vec::with_capacity(n);
    for idx in 0..n as u64 {
        let scene_seed = seeds.next(split, idx);
        let scene = generate_scene(spec, scene_seed);
        let mut rng = stream_rng(&format!("corpus/{split}/question"), &[seed, idx]);
        let (question, answer, family) = answerable_question(&scene, weights, &mut rng)?;
        records.push(VQARecord {
            id: format!("{id_prefix}-{idx:06}"),
            scene_seed,
            style_tag: spec.style_tag.clone(),
            world_hash: spec.content_hash(),
            question,
            answer,
            family: FamilyTag::Known(family),
            provenance: Provenance::Real,
            group_id: None,
            generation: None,
        });
    }
    Ok(DatasetManifest::new(split, records).expect("generated ids are unique"))
}

/// Draws (question, answer, family) for a scene, redrawing families that
/// cannot produce an answerable question there.
fn answerable_question(
    scene: &SceneGraph,
    weights: &FamilyWeights,
    rng: &mut ChaCha8Rng,
) -> Result<(String, String, Family), ConfigError> {
    for _ in 0..QUESTION_ATTEMPTS {
        let family = weights.sample(rng);
        let Some(parsed) = draw_question(scene, family, rng) else {
            continue;
        };
        let question = render_question(&scene.spec, &parsed, 0);
        match answer_parsed(scene, &parsed) {
            OracleOutcome::Answer(answer) => return Ok((question, answer, family)),
            OracleOutcome::Unanswerable => {
                unreachable!("draw_question only returns answerable slots")
            }
        }
    }
    Err(ConfigError::QuestionBudgetExhausted(scene.seed))
}

/// Replaces each test question with `k` oracle-equivalent paraphrases,
/// grouped by the original record id. `k = 0` yields an empty split.
pub fn make_rephrasing_split(
    spec: &Arc<WorldSpec>,
    test: &DatasetManifest,
    k: usize,
) -> Result<DatasetManifest, ConfigError> {
    if k > PARAPHRASES_PER_FAMILY {
        return Err(ConfigError::RephrasingDepth { requested: k, available: PARAPHRASES_PER_FAMILY });
    }
    let world_hash = spec.content_hash();
    let mut records = Vec::with_capacity(test.len() * k);
    for original in &test.records {
        if original.world_hash != world_hash {
            return Err(ConfigError::WorldMismatch { id: original.id.clone() });
        }
        // Paraphrasing requires slots, so the question must match a template;
        // pseudolabeled records that drifted off-template are not rephrasable.
        let parsed = match_question(spec, &original.question).ok_or_else(|| {
            ConfigError::UnparseableQuestion {
                id: original.id.clone(),
                question: original.question.clone(),
            }
        })?;
        for j in 1..=k {
            let question = render_question(spec, &parsed, j);
            records.push(VQARecord {
                id: format!("{}-r{j}", original.id),
                question,
                group_id: Some(original.id.clone()),
                ..original.clone()
            });
        }
    }
    Ok(DatasetManifest::new(format!("{}-rephrasings", test.split), records)
        .expect("paraphrase ids inherit unique originals"))
}

/// Builds scenes with the shortcut correlation inverted and asks the
/// canonical color question about the biased shape, so a model leaning on
/// the shortcut answers every record wrong.
pub fn make_counterexample_split(
    spec: &Arc<WorldSpec>,
    n: usize,
    seed: u64,
) -> Result<DatasetManifest, ConfigError> {
    spec.validate()?;
    if spec.shortcut_bias <= 0.5 {
        return Err(ConfigError::NoShortcutToCounter(spec.shortcut_bias));
    }
    let style_tag = format!("{}{COUNTEREXAMPLE_TAG_SUFFIX}", spec.style_tag);
    let mut records = Vec::with_capacity(n);
    for idx in 0..n as u64 {
        let scene_seed = derive_seed("corpus/counterexample", &[seed, idx]);
        let scene = generate_counterexample_scene(spec, scene_seed);
        let parsed = ParsedQuestion {
            family: Family::ColorQuery,
            surface: 0,
            shape: Some(0),
            color: None,
            row: None,
            col: None,
        };
        let question = render_question(spec, &parsed, 0);
        let OracleOutcome::Answer(answer) = answer_parsed(&scene, &parsed) else {
            unreachable!("counterexample scenes give the biased shape one color")
        };
        debug_assert_ne!(answer, spec.color_vocab[0], "shortcut answer must be wrong");
        records.push(VQARecord {
            id: format!("ce-{idx:06}"),
            scene_seed,
            style_tag: style_tag.clone(),
            world_hash: spec.content_hash(),
            question,
            answer,
            family: FamilyTag::Known(Family::ColorQuery),
            provenance: Provenance::Real,
            group_id: None,
            generation: None,
        });
    }
    Ok(DatasetManifest::new("counterexample", records).expect("generated ids are unique"))
}

/// Deterministic post-transform of [`generate_scene`]: guarantee at least
/// one object of the biased shape, then recolor all of them to one color
/// that is never the shortcut color.
pub(crate) fn generate_counterexample_scene(spec: &Arc<WorldSpec>, seed: u64) -> SceneGraph {
    let mut scene = generate_scene(spec, seed);
    if !scene.objects.iter().any(|o| o.shape == 0) {
        scene.objects[0].shape = 0;
    }
    let forced_color = 1 + (seed as usize % (spec.color_vocab.len() - 1));
    for object in &mut scene.objects {
        if object.shape == 0 {
            object.color = forced_color;
        }
    }
    scene
}

/// Builds a split of count-family questions only.
pub fn make_numeric_split(
    spec: &Arc<WorldSpec>,
    n: usize,
    seed: u64,
) -> Result<DatasetManifest, ConfigError> {
    spec.validate()?;
    let mut records = Vec::with_capacity(n);
    for idx in 0..n as u64 {
        let scene_seed = derive_seed("corpus/numeric", &[seed, idx]);
        let scene = generate_scene(spec, scene_seed);
        let mut rng = stream_rng("corpus/numeric/question", &[seed, idx]);
        let parsed = draw_question(&scene, Family::Count, &mut rng)
            .expect("count questions never depend on scene contents");
        let question = render_question(spec, &parsed, 0);
        let OracleOutcome::Answer(answer) = answer_parsed(&scene, &parsed) else {
            unreachable!("count questions are always answerable")
        };
        records.push(VQARecord {
            id: format!("num-{idx:06}"),
            scene_seed,
            style_tag: spec.style_tag.clone(),
            world_hash: spec.content_hash(),
            question,
            answer,
            family: FamilyTag::Known(Family::Count),
            provenance: Provenance::Real,
            group_id: None,
            generation: None,
        });
    }
    Ok(DatasetManifest::new("numeric", records).expect("generated ids are unique"))
}
