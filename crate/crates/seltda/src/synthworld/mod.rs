//! A procedural grid micro-world with an exact answer oracle.
//!
//! Scenes are square grids holding at most one object per cell; each object
//! has a shape, a color, and a size drawn from closed vocabularies. Scenes
//! are pure functions of `(WorldSpec, seed)`, so datasets persist only seeds
//! and regenerate tensors on demand. The oracle answers templated questions
//! exactly, standing in for human annotation.

mod corpus;
mod templates;

pub(crate) use templates::template_words;

pub use corpus::{
    build_corpus, build_corpus_weighted, make_counterexample_split, make_numeric_split,
    make_rephrasing_split, FamilyWeights, ImagePool, PoolImage, COUNTEREXAMPLE_TAG_SUFFIX,
};
pub use templates::{
    match_question, oracle_answer, Family, OracleOutcome, ParsedQuestion, TemplateParseError,
    ALL_FAMILIES,
};

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::seeding::stream_rng;

/// Invalid world description or split request.
#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("grid_size must be ≥ 2, got {0}")]
    GridTooSmall(usize),
    #[error("{0} vocabulary is empty")]
    EmptyVocab(&'static str),
    #[error("{0} vocabulary has duplicates or multi-word entries")]
    BadVocab(&'static str),
    #[error("shortcut_bias {0} outside [0, 1]")]
    BiasOutOfRange(f64),
    #[error("fact_table key {0:?} is not in shape_vocab")]
    UnknownFactShape(String),
    #[error("counterexample split needs shortcut_bias > 0.5, got {0}")]
    NoShortcutToCounter(f64),
    #[error("rephrasing depth {requested} exceeds available paraphrases ({available})")]
    RephrasingDepth { requested: usize, available: usize },
    #[error("no answerable question found for scene seed {0} within the attempt budget")]
    QuestionBudgetExhausted(u64),
    #[error("record {id:?} holds a question outside every template family: {question:?}")]
    UnparseableQuestion { id: String, question: String },
    #[error("record {id:?} was generated under a different world")]
    WorldMismatch { id: String },
    #[error("family weights must include a positive weight somewhere")]
    DegenerateFamilyWeights,
}

/// Full description of a world: geometry, vocabularies, knowledge, bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    /// Cells per side; the grid has `grid_size²` cells.
    pub grid_size: usize,
    pub shape_vocab: Vec<String>,
    pub color_vocab: Vec<String>,
    pub size_vocab: Vec<String>,
    /// Shape → fact lookup; stands in for external knowledge. Keys must be
    /// shapes. Only shapes present in a scene can be asked about.
    pub fact_table: BTreeMap<String, String>,
    /// Domain identifier; the shifted domain gets a different tag.
    pub style_tag: String,
    /// Probability that the first shape takes the first color (the trainable
    /// shortcut). 0 disables the skew; with bias `b`,
    /// P(first color | first shape) = b + (1−b)/|colors|.
    pub shortcut_bias: f64,
}

impl WorldSpec {
    /// The default world used throughout tests and example configs.
    pub fn default_world() -> Self {
        WorldSpec {
            grid_size: 4,
            shape_vocab: ["cube", "sphere", "pyramid", "cylinder", "fox", "owl"]
                .map(String::from)
                .to_vec(),
            color_vocab: ["red", "blue", "green", "yellow", "purple", "brown"]
                .map(String::from)
                .to_vec(),
            size_vocab: ["small", "large"].map(String::from).to_vec(),
            fact_table: BTreeMap::from([
                ("fox".to_string(), "berries".to_string()),
                ("owl".to_string(), "mice".to_string()),
            ]),
            style_tag: "source".to_string(),
            shortcut_bias: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.grid_size < 2 {
            return Err(ConfigError::GridTooSmall(self.grid_size));
        }
        for (name, vocab) in [
            ("shape", &self.shape_vocab),
            ("color", &self.color_vocab),
            ("size", &self.size_vocab),
        ] {
            if vocab.is_empty() {
                return Err(ConfigError::EmptyVocab(name));
            }
            let mut seen = std::collections::BTreeSet::new();
            for word in vocab {
                if word.is_empty() || word.contains(char::is_whitespace) || !seen.insert(word) {
                    return Err(ConfigError::BadVocab(name));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.shortcut_bias) {
            return Err(ConfigError::BiasOutOfRange(self.shortcut_bias));
        }
        for key in self.fact_table.keys() {
            if !self.shape_vocab.contains(key) {
                return Err(ConfigError::UnknownFactShape(key.clone()));
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid_size * self.grid_size
    }

    /// Width of one encoded cell: occupancy + one-hot shape/color/size blocks.
    pub fn feature_dim(&self) -> usize {
        1 + self.shape_vocab.len() + self.color_vocab.len() + self.size_vocab.len()
    }

    /// Stable content hash of the spec, used in image refs and manifests.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(self).expect("spec serializes"));
        hex_prefix(&hasher.finalize(), 16)
    }

    /// Every surface word this world can put in a question or answer:
    /// attribute vocabularies (plus plurals for shapes), numerals up to the
    /// cell count, and fact strings.
    pub fn surface_words(&self) -> Vec<String> {
        let mut words = Vec::new();
        for shape in &self.shape_vocab {
            words.push(shape.clone());
            words.push(pluralize(shape));
        }
        words.extend(self.color_vocab.iter().cloned());
        words.extend(self.size_vocab.iter().cloned());
        for n in 0..=self.cells() {
            words.push(n.to_string());
        }
        for fact in self.fact_table.values() {
            words.extend(fact.split_whitespace().map(String::from));
        }
        words
    }
}

pub(crate) fn hex_prefix(digest: &[u8], chars: usize) -> String {
    let mut s = String::with_capacity(chars);
    for byte in digest {
        s.push_str(&format!("{byte:02x}"));
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}

/// Plural surface form of a shape word ("cube" → "cubes", "fox" → "foxes").
pub fn pluralize(word: &str) -> String {
    if word.ends_with('s')
        || word.ends_with('x')
        || word.ends_with("ch")
        || word.ends_with("sh")
    {
        format!("{word}es")
    } else {
        format!("{word}s")
    }
}

/// One placed object; attribute fields index into the spec vocabularies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneObject {
    pub cell: usize,
    pub shape: usize,
    pub color: usize,
    pub size: usize,
}

/// A generated scene. Carries its spec so the oracle and the encoder are
/// self-contained; scenes are never persisted (only their seeds are).
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    pub spec: Arc<WorldSpec>,
    pub seed: u64,
    /// Objects sorted by cell index; at most one per cell.
    pub objects: Vec<SceneObject>,
}

impl SceneGraph {
    pub fn object_at(&self, cell: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.cell == cell)
    }

    pub fn shape_word(&self, obj: &SceneObject) -> &str {
        &self.spec.shape_vocab[obj.shape]
    }

    pub fn color_word(&self, obj: &SceneObject) -> &str {
        &self.spec.color_vocab[obj.color]
    }

    pub fn size_word(&self, obj: &SceneObject) -> &str {
        &self.spec.size_vocab[obj.size]
    }
}

/// Dense one-hot encoding of a scene: one row per cell, columns are
/// [occupancy | shape one-hot | color one-hot | size one-hot].
pub type ImageTensor = Array2<f64>;

/// Draws a scene as a pure function of `(spec, seed)`.
///
/// Object count is uniform on `[1, grid²]`; cells are a uniform sample
/// without replacement; attributes are uniform except that the first shape
/// takes the first color with probability `shortcut_bias` (and a uniform
/// color otherwise).
pub fn generate_scene(spec: &Arc<WorldSpec>, seed: u64) -> SceneGraph {
    let mut rng = stream_rng("scene", &[seed]);
    let cells = spec.cells();
    let count = rng.gen_range(1..=cells);

    // Partial Fisher-Yates: the first `count` entries are the chosen cells.
    let mut cell_ids: Vec<usize> = (0..cells).collect();
    for i in 0..count {
        let j = rng.gen_range(i..cells);
        cell_ids.swap(i, j);
    }

    let mut objects: Vec<SceneObject> = cell_ids[..count]
        .iter()
        .map(|&cell| {
            let shape = rng.gen_range(0..spec.shape_vocab.len());
            let color = if shape == 0 && rng.gen::<f64>() < spec.shortcut_bias {
                0
            } else {
                rng.gen_range(0..spec.color_vocab.len())
            };
            let size = rng.gen_range(0..spec.size_vocab.len());
            SceneObject { cell, shape, color, size }
        })
        .collect();
    objects.sort_by_key(|o| o.cell);

    SceneGraph { spec: Arc::clone(spec), seed, objects }
}

/// Encodes a scene as its grid tensor. Deterministic; empty cells are all
/// zero, occupied cells have exactly one 1 in each block.
pub fn encode_scene(scene: &SceneGraph) -> ImageTensor {
    let spec = &scene.spec;
    let mut values = Array2::zeros((spec.cells(), spec.feature_dim()));
    let shapes = spec.shape_vocab.len();
    let colors = spec.color_vocab.len();
    for obj in &scene.objects {
        values[(obj.cell, 0)] = 1.0;
        values[(obj.cell, 1 + obj.shape)] = 1.0;
        values[(obj.cell, 1 + shapes + obj.color)] = 1.0;
        values[(obj.cell, 1 + shapes + colors + obj.size)] = 1.0;
    }
    values
}

/// Deterministic scene description used as the caption-pretraining target,
/// e.g. `this is a small red cube and a large blue owl .` — at most
/// `max_objects` leading objects in cell order are described so captions fit
/// the decoder's target-length budget.
pub fn scene_caption(scene: &SceneGraph, max_objects: usize) -> String {
    let phrases: Vec<String> = scene
        .objects
        .iter()
        .take(max_objects.max(1))
        .map(|o| {
            format!(
                "a {} {} {}",
                scene.size_word(o),
                scene.color_word(o),
                scene.shape_word(o)
            )
        })
        .collect();
    format!("this is {}.", phrases.join(" and "))
}

/// Words the captioner can emit beyond the attribute vocabulary.
pub const CAPTION_WORDS: [&str; 4] = ["this", "is", "a", "and"];

/// Reserve vocabularies that [`make_shifted_domain`] substitutes in.
const RESERVE_COLORS: [&str; 6] = ["orange", "pink", "gray", "violet", "olive", "navy"];
const RESERVE_SIZES: [&str; 4] = ["tiny", "huge", "giant", "medium"];

/// Builds the shifted domain: same shapes, question families, and knowledge,
/// but only `shared_fraction` of the color and size vocabularies survive;
/// the rest are replaced by reserve words, and the style tag changes.
pub fn make_shifted_domain(spec: &WorldSpec) -> WorldSpec {
    make_shifted_domain_frac(spec, 0.5)
}

/// [`make_shifted_domain`] with an explicit shared fraction in [0, 1].
pub fn make_shifted_domain_frac(spec: &WorldSpec, shared_fraction: f64) -> WorldSpec {
    let replace = |vocab: &[String], reserve: &[&str]| -> Vec<String> {
        let keep = ((vocab.len() as f64) * shared_fraction.clamp(0.0, 1.0)).round() as usize;
        let mut out: Vec<String> = vocab[..keep.min(vocab.len())].to_vec();
        let mut fresh = reserve
            .iter()
            .map(|w| w.to_string())
            .filter(|w| !vocab.contains(w));
        while out.len() < vocab.len() {
            out.push(fresh.next().expect("reserve vocabulary large enough"));
        }
        out
    };
    WorldSpec {
        grid_size: spec.grid_size,
        shape_vocab: spec.shape_vocab.clone(),
        color_vocab: replace(&spec.color_vocab, &RESERVE_COLORS),
        size_vocab: replace(&spec.size_vocab, &RESERVE_SIZES),
        fact_table: spec.fact_table.clone(),
        style_tag: format!("{}-shifted", spec.style_tag),
        shortcut_bias: spec.shortcut_bias,
    }
}

/// Regenerates the scene behind a dataset record.
///
/// Counterexample records carry a style tag ending in
/// [`COUNTEREXAMPLE_TAG_SUFFIX`] and are rebuilt with the inverted-shortcut
/// constructor; everything else is a plain [`generate_scene`].
pub fn scene_for_record(spec: &Arc<WorldSpec>, scene_seed: u64, style_tag: &str) -> SceneGraph {
    if style_tag.ends_with(COUNTEREXAMPLE_TAG_SUFFIX) {
        corpus::generate_counterexample_scene(spec, scene_seed)
    } else {
        generate_scene(spec, scene_seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arc(spec: WorldSpec) -> Arc<WorldSpec> {
        Arc::new(spec)
    }

    #[test]
    fn default_world_is_valid() {
        WorldSpec::default_world().validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut spec = WorldSpec::default_world();
        spec.grid_size = 1;
        assert_eq!(spec.validate(), Err(ConfigError::GridTooSmall(1)));

        let mut spec = WorldSpec::default_world();
        spec.color_vocab.clear();
        assert_eq!(spec.validate(), Err(ConfigError::EmptyVocab("color")));

        let mut spec = WorldSpec::default_world();
        spec.shape_vocab.push("cube".into());
        assert_eq!(spec.validate(), Err(ConfigError::BadVocab("shape")));

        let mut spec = WorldSpec::default_world();
        spec.shortcut_bias = 1.5;
        assert!(matches!(spec.validate(), Err(ConfigError::BiasOutOfRange(_))));

        let mut spec = WorldSpec::default_world();
        spec.fact_table.insert("dragon".into(), "gold".into());
        assert!(matches!(spec.validate(), Err(ConfigError::UnknownFactShape(_))));
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let spec = arc(WorldSpec::default_world());
        assert_eq!(generate_scene(&spec, 7), generate_scene(&spec, 7));
    }

    #[test]
    fn bias_one_forces_the_correlation() {
        let mut spec = WorldSpec::default_world();
        spec.shortcut_bias = 1.0;
        let spec = arc(spec);
        for seed in 0..200 {
            let scene = generate_scene(&spec, seed);
            for obj in scene.objects.iter().filter(|o| o.shape == 0) {
                assert_eq!(obj.color, 0, "seed {seed}: biased shape must take color 0");
            }
        }
    }

    #[test]
    fn object_count_within_bounds() {
        let spec = arc(WorldSpec::default_world());
        for seed in 0..500 {
            let scene = generate_scene(&spec, seed);
            assert!((1..=16).contains(&scene.objects.len()));
            let mut cells: Vec<usize> = scene.objects.iter().map(|o| o.cell).collect();
            let n = cells.len();
            cells.dedup();
            assert_eq!(cells.len(), n, "one object per cell");
            assert!(cells.iter().all(|&c| c < 16));
        }
    }

    #[test]
    fn shortcut_frequency_matches_the_bias_formula() {
        let mut spec = WorldSpec::default_world();
        spec.shortcut_bias = 0.9;
        let spec = arc(spec);
        let mut biased_shape = 0usize;
        let mut biased_both = 0usize;
        let mut seed = 0u64;
        while biased_shape < 10_000 {
            let scene = generate_scene(&spec, seed);
            for obj in scene.objects.iter().filter(|o| o.shape == 0) {
                biased_shape += 1;
                if obj.color == 0 {
                    biased_both += 1;
                }
            }
            seed += 1;
        }
        let expected = 0.9 + 0.1 / spec.color_vocab.len() as f64;
        let observed = biased_both as f64 / biased_shape as f64;
        assert!(
            (observed - expected).abs() < 0.03,
            "P(color0|shape0) = {observed:.4}, expected {expected:.4}"
        );
    }

    #[test]
    fn empty_scene_encodes_to_zero() {
        let spec = arc(WorldSpec::default_world());
        let scene = SceneGraph { spec: Arc::clone(&spec), seed: 0, objects: vec![] };
        assert!(encode_scene(&scene).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_object_encodes_four_ones() {
        let spec = arc(WorldSpec::default_world());
        let scene = SceneGraph {
            spec: Arc::clone(&spec),
            seed: 0,
            objects: vec![SceneObject { cell: 5, shape: 2, color: 3, size: 1 }],
        };
        let tensor = encode_scene(&scene);
        assert_eq!(tensor.sum(), 4.0);
        assert_eq!(tensor.row(5).sum(), 4.0);
        assert_eq!(tensor[(5, 0)], 1.0);
    }

    /// Argmax inverse of `encode_scene`, used only to validate the encoding.
    fn decode_by_argmax(spec: &Arc<WorldSpec>, tensor: &ImageTensor) -> Vec<SceneObject> {
        let shapes = spec.shape_vocab.len();
        let colors = spec.color_vocab.len();
        let sizes = spec.size_vocab.len();
        let argmax = |row: ndarray::ArrayView1<f64>, lo: usize, n: usize| -> usize {
            (0..n).max_by(|&a, &b| row[lo + a].partial_cmp(&row[lo + b]).unwrap()).unwrap()
        };
        (0..spec.cells())
            .filter(|&cell| tensor[(cell, 0)] > 0.5)
            .map(|cell| {
                let row = tensor.row(cell);
                SceneObject {
                    cell,
                    shape: argmax(row, 1, shapes),
                    color: argmax(row, 1 + shapes, colors),
                    size: argmax(row, 1 + shapes + colors, sizes),
                }
            })
            .collect()
    }

    #[test]
    fn encode_round_trips_through_argmax_on_random_scenes() {
        let spec = arc(WorldSpec::default_world());
        for seed in 0..1000 {
            let scene = generate_scene(&spec, seed);
            let decoded = decode_by_argmax(&spec, &encode_scene(&scene));
            assert_eq!(decoded, scene.objects, "seed {seed}");
        }
    }

    #[test]
    fn captions_describe_leading_objects() {
        let spec = arc(WorldSpec::default_world());
        let scene = SceneGraph {
            spec: Arc::clone(&spec),
            seed: 0,
            objects: vec![
                SceneObject { cell: 1, shape: 0, color: 0, size: 0 },
                SceneObject { cell: 9, shape: 5, color: 1, size: 1 },
            ],
        };
        assert_eq!(
            scene_caption(&scene, 6),
            "this is a small red cube and a large blue owl."
        );
        assert_eq!(scene_caption(&scene, 1), "this is a small red cube.");
    }

    #[test]
    fn shifted_domain_shares_exactly_half_the_colors() {
        let spec = WorldSpec::default_world();
        let shifted = make_shifted_domain(&spec);
        shifted.validate().unwrap();
        let shared = shifted
            .color_vocab
            .iter()
            .filter(|c| spec.color_vocab.contains(c))
            .count();
        assert_eq!(shared, spec.color_vocab.len() / 2);
        assert_eq!(shifted.color_vocab.len(), spec.color_vocab.len());
        assert_ne!(shifted.style_tag, spec.style_tag);
        assert_eq!(shifted.shape_vocab, spec.shape_vocab);
    }

    #[test]
    fn pluralize_handles_sibilants() {
        assert_eq!(pluralize("cube"), "cubes");
        assert_eq!(pluralize("fox"), "foxes");
    }
}
