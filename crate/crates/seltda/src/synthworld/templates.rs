//! Question template families, the surface-form matcher, and the oracle.
//!
//! Six families cover attribute queries, counting, spatial lookup, boolean
//! existence, and table-backed knowledge. Each family has one canonical
//! surface plus three paraphrases with identical slots, so paraphrases are
//! oracle-equivalent by construction. The matcher inverts any surface back
//! to (family, slots), which is also how pseudolabels get audited.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{pluralize, SceneGraph, WorldSpec};

/// Question family identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    ColorQuery,
    ShapeQuery,
    Count,
    Spatial,
    ExistenceBoolean,
    Knowledge,
}

pub const ALL_FAMILIES: [Family; 6] = [
    Family::ColorQuery,
    Family::ShapeQuery,
    Family::Count,
    Family::Spatial,
    Family::ExistenceBoolean,
    Family::Knowledge,
];

impl Family {
    pub fn label(&self) -> &'static str {
        match self {
            Family::ColorQuery => "color-query",
            Family::ShapeQuery => "shape-query",
            Family::Count => "count",
            Family::Spatial => "spatial",
            Family::ExistenceBoolean => "existence-boolean",
            Family::Knowledge => "knowledge",
        }
    }

    pub fn from_label(label: &str) -> Option<Family> {
        ALL_FAMILIES.into_iter().find(|f| f.label() == label)
    }
}

/// Surface patterns per family; index 0 is canonical, 1.. are paraphrases.
/// Slots: `{shape}` `{shape_plural}` `{color}` `{row}` `{col}`.
const SURFACES: [(Family, [&str; 4]); 6] = [
    (
        Family::ColorQuery,
        [
            "what color is the {shape}",
            "what is the color of the {shape}",
            "which color is the {shape}",
            "tell me the color of the {shape}",
        ],
    ),
    (
        Family::ShapeQuery,
        [
            "what shape is the {color} object",
            "what is the shape of the {color} object",
            "which shape is the {color} object",
            "tell me the shape of the {color} object",
        ],
    ),
    (
        Family::Count,
        [
            "how many {shape_plural} are there",
            "how many {shape_plural} do you see",
            "what is the number of {shape_plural}",
            "count the {shape_plural}",
        ],
    ),
    (
        Family::Spatial,
        [
            "what shape is in row {row} column {col}",
            "which shape is in row {row} column {col}",
            "what is the shape in row {row} column {col}",
            "name the shape in row {row} column {col}",
        ],
    ),
    (
        Family::ExistenceBoolean,
        [
            "is there a {color} {shape}",
            "is this a picture with a {color} {shape}",
            "does the image contain a {color} {shape}",
            "can you see a {color} {shape}",
        ],
    ),
    (
        Family::Knowledge,
        [
            "what does the {shape} eat",
            "what food does the {shape} eat",
            "what is the food of the {shape}",
            "which food does the {shape} eat",
        ],
    ),
];

/// Number of paraphrases available beyond each canonical surface.
pub(crate) const PARAPHRASES_PER_FAMILY: usize = 3;

/// Every literal word appearing in any surface pattern.
pub(crate) fn template_words() -> Vec<&'static str> {
    let mut words = Vec::new();
    for (_, patterns) in SURFACES {
        for pattern in patterns {
            for word in pattern.split_whitespace() {
                if !word.starts_with('{') && !words.contains(&word) {
                    words.push(word);
                }
            }
        }
    }
    words
}

fn surfaces_for(family: Family) -> &'static [&'static str; 4] {
    &SURFACES.iter().find(|(f, _)| *f == family).expect("family registered").1
}

/// A question reduced to its family, surface index, and slot values.
/// `shape`/`color` are vocabulary indices; `row`/`col` are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedQuestion {
    pub family: Family,
    pub surface: usize,
    pub shape: Option<usize>,
    pub color: Option<usize>,
    pub row: Option<usize>,
    pub col: Option<usize>,
}

/// The question matched no surface of any family.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("question matches no template family: {0:?}")]
pub struct TemplateParseError(pub String);

/// Oracle verdict for a parsed question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleOutcome {
    Answer(String),
    /// The referent is absent or ambiguous in this scene; such questions are
    /// excluded from generated corpora but counted when auditing pseudolabels.
    Unanswerable,
}

impl OracleOutcome {
    pub fn answer(&self) -> Option<&str> {
        match self {
            OracleOutcome::Answer(a) => Some(a),
            OracleOutcome::Unanswerable => None,
        }
    }
}

/// Tries every surface of every family; first match wins (the order is fixed,
/// so matching is deterministic).
pub fn match_question(spec: &WorldSpec, question: &str) -> Option<ParsedQuestion> {
    let words: Vec<&str> = question.split_whitespace().collect();
    for (family, patterns) in SURFACES {
        for (surface, pattern) in patterns.iter().enumerate() {
            if let Some(parsed) = match_surface(spec, family, surface, pattern, &words) {
                return Some(parsed);
            }
        }
    }
    None
}

fn match_surface(
    spec: &WorldSpec,
    family: Family,
    surface: usize,
    pattern: &str,
    words: &[&str],
) -> Option<ParsedQuestion> {
    let parts: Vec<&str> = pattern.split_whitespace().collect();
    if parts.len() != words.len() {
        return None;
    }
    let mut parsed = ParsedQuestion {
        family,
        surface,
        shape: None,
        color: None,
        row: None,
        col: None,
    };
    for (part, word) in parts.iter().zip(words) {
        match *part {
            "{shape}" => parsed.shape = Some(spec.shape_vocab.iter().position(|s| s == word)?),
            "{shape_plural}" => {
                parsed.shape =
                    Some(spec.shape_vocab.iter().position(|s| pluralize(s) == *word)?)
            }
            "{color}" => parsed.color = Some(spec.color_vocab.iter().position(|c| c == word)?),
            "{row}" => parsed.row = Some(parse_coord(spec, word)?),
            "{col}" => parsed.col = Some(parse_coord(spec, word)?),
            lit => {
                if lit != *word {
                    return None;
                }
            }
        }
    }
    Some(parsed)
}

fn parse_coord(spec: &WorldSpec, word: &str) -> Option<usize> {
    let n: usize = word.parse().ok()?;
    (1..=spec.grid_size).contains(&n).then_some(n)
}

/// Renders a parsed question with the given surface index (0 = canonical).
pub(crate) fn render_question(spec: &WorldSpec, q: &ParsedQuestion, surface: usize) -> String {
    let pattern = surfaces_for(q.family)[surface];
    pattern
        .split_whitespace()
        .map(|part| match part {
            "{shape}" => spec.shape_vocab[q.shape.expect("shape slot")].clone(),
            "{shape_plural}" => pluralize(&spec.shape_vocab[q.shape.expect("shape slot")]),
            "{color}" => spec.color_vocab[q.color.expect("color slot")].clone(),
            "{row}" => q.row.expect("row slot").to_string(),
            "{col}" => q.col.expect("col slot").to_string(),
            lit => lit.to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Answers a question string against a scene.
pub fn oracle_answer(scene: &SceneGraph, question: &str) -> Result<OracleOutcome, TemplateParseError> {
    let parsed = match_question(&scene.spec, question)
        .ok_or_else(|| TemplateParseError(question.to_string()))?;
    Ok(answer_parsed(scene, &parsed))
}

/// Oracle semantics per family. Attribute queries require the referent to be
/// present and unambiguous (all matching objects agree on the queried
/// attribute); counting and existence are always answerable.
pub(crate) fn answer_parsed(scene: &SceneGraph, q: &ParsedQuestion) -> OracleOutcome {
    let spec = &scene.spec;
    match q.family {
        Family::ColorQuery => {
            let shape = q.shape.expect("color-query has a shape slot");
            let mut colors = scene.objects.iter().filter(|o| o.shape == shape).map(|o| o.color);
            match colors.next() {
                None => OracleOutcome::Unanswerable,
                Some(first) if colors.all(|c| c == first) => {
                    OracleOutcome::Answer(spec.color_vocab[first].clone())
                }
                Some(_) => OracleOutcome::Unanswerable,
            }
        }
        Family::ShapeQuery => {
            let color = q.color.expect("shape-query has a color slot");
            let mut shapes = scene.objects.iter().filter(|o| o.color == color).map(|o| o.shape);
            match shapes.next() {
                None => OracleOutcome::Unanswerable,
                Some(first) if shapes.all(|s| s == first) => {
                    OracleOutcome::Answer(spec.shape_vocab[first].clone())
                }
                Some(_) => OracleOutcome::Unanswerable,
            }
        }
        Family::Count => {
            let shape = q.shape.expect("count has a shape slot");
            let n = scene.objects.iter().filter(|o| o.shape == shape).count();
            OracleOutcome::Answer(n.to_string())
        }
        Family::Spatial => {
            let row = q.row.expect("spatial has a row slot");
            let col = q.col.expect("spatial has a col slot");
            let cell = (row - 1) * spec.grid_size + (col - 1);
            match scene.object_at(cell) {
                Some(obj) => OracleOutcome::Answer(spec.shape_vocab[obj.shape].clone()),
                None => OracleOutcome::Unanswerable,
            }
        }
        Family::ExistenceBoolean => {
            let shape = q.shape.expect("existence has a shape slot");
            let color = q.color.expect("existence has a color slot");
            let found = scene.objects.iter().any(|o| o.shape == shape && o.color == color);
            OracleOutcome::Answer(if found { "yes" } else { "no" }.to_string())
        }
        Family::Knowledge => {
            let shape = q.shape.expect("knowledge has a shape slot");
            let word = &spec.shape_vocab[shape];
            let present = scene.objects.iter().any(|o| o.shape == shape);
            match (present, spec.fact_table.get(word)) {
                (true, Some(fact)) => OracleOutcome::Answer(fact.clone()),
                _ => OracleOutcome::Unanswerable,
            }
        }
    }
}

/// Draws slot values for one family against a scene, or `None` when the
/// family cannot produce an answerable question there (e.g. color-query with
/// no unambiguous referent). Used by the corpus builders.
pub(crate) fn draw_question(
    scene: &SceneGraph,
    family: Family,
    rng: &mut ChaCha8Rng,
) -> Option<ParsedQuestion> {
    let spec = &scene.spec;
    let mut q = ParsedQuestion {
        family,
        surface: 0,
        shape: None,
        color: None,
        row: None,
        col: None,
    };
    match family {
        Family::ColorQuery => {
            let mut candidates: Vec<usize> = (0..spec.shape_vocab.len())
                .filter(|&s| {
                    let mut colors = scene.objects.iter().filter(|o| o.shape == s).map(|o| o.color);
                    matches!(colors.next(), Some(first) if colors.all(|c| c == first))
                })
                .collect();
            if candidates.is_empty() {
                return None;
            }
            q.shape = Some(candidates.swap_remove(rng.gen_range(0..candidates.len())));
        }
        Family::ShapeQuery => {
            let mut candidates: Vec<usize> = (0..spec.color_vocab.len())
                .filter(|&c| {
                    let mut shapes = scene.objects.iter().filter(|o| o.color == c).map(|o| o.shape);
                    matches!(shapes.next(), Some(first) if shapes.all(|s| s == first))
                })
                .collect();
            if candidates.is_empty() {
                return None;
            }
            q.color = Some(candidates.swap_remove(rng.gen_range(0..candidates.len())));
        }
        Family::Count => {
            q.shape = Some(rng.gen_range(0..spec.shape_vocab.len()));
        }
        Family::Spatial => {
            let obj = &scene.objects[rng.gen_range(0..scene.objects.len())];
            q.row = Some(obj.cell / spec.grid_size + 1);
            q.col = Some(obj.cell % spec.grid_size + 1);
        }
        Family::ExistenceBoolean => {
            q.shape = Some(rng.gen_range(0..spec.shape_vocab.len()));
            q.color = Some(rng.gen_range(0..spec.color_vocab.len()));
        }
        Family::Knowledge => {
            let mut candidates: Vec<usize> = (0..spec.shape_vocab.len())
                .filter(|&s| {
                    spec.fact_table.contains_key(&spec.shape_vocab[s])
                        && scene.objects.iter().any(|o| o.shape == s)
                })
                .collect();
            if candidates.is_empty() {
                return None;
            }
            q.shape = Some(candidates.swap_remove(rng.gen_range(0..candidates.len())));
        }
    }
    debug_assert!(
        !matches!(answer_parsed(scene, &q), OracleOutcome::Unanswerable),
        "drawn question should be answerable by construction"
    );
    Some(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{generate_scene, SceneObject};
    use std::sync::Arc;

    fn scene_with(objects: Vec<SceneObject>) -> SceneGraph {
        SceneGraph {
            spec: Arc::new(WorldSpec::default_world()),
            seed: 0,
            objects,
        }
    }

    #[test]
    fn counts_spheres() {
        let scene = scene_with(vec![
            SceneObject { cell: 0, shape: 1, color: 2, size: 0 },
            SceneObject { cell: 3, shape: 1, color: 4, size: 1 },
            SceneObject { cell: 7, shape: 1, color: 0, size: 0 },
        ]);
        assert_eq!(
            oracle_answer(&scene, "how many spheres are there").unwrap(),
            OracleOutcome::Answer("3".into())
        );
        assert_eq!(
            oracle_answer(&scene, "how many cubes are there").unwrap(),
            OracleOutcome::Answer("0".into())
        );
    }

    #[test]
    fn absent_referent_is_unanswerable() {
        let scene = scene_with(vec![SceneObject { cell: 0, shape: 1, color: 2, size: 0 }]);
        assert_eq!(
            oracle_answer(&scene, "what color is the cube").unwrap(),
            OracleOutcome::Unanswerable
        );
    }

    #[test]
    fn ambiguous_referent_is_unanswerable() {
        let scene = scene_with(vec![
            SceneObject { cell: 0, shape: 0, color: 1, size: 0 },
            SceneObject { cell: 1, shape: 0, color: 2, size: 0 },
        ]);
        assert_eq!(
            oracle_answer(&scene, "what color is the cube").unwrap(),
            OracleOutcome::Unanswerable
        );
    }

    #[test]
    fn knowledge_lookup_requires_presence() {
        let with_fox = scene_with(vec![SceneObject { cell: 2, shape: 4, color: 1, size: 0 }]);
        assert_eq!(
            oracle_answer(&with_fox, "what does the fox eat").unwrap(),
            OracleOutcome::Answer("berries".into())
        );
        let without = scene_with(vec![SceneObject { cell: 2, shape: 0, color: 1, size: 0 }]);
        assert_eq!(
            oracle_answer(&without, "what does the fox eat").unwrap(),
            OracleOutcome::Unanswerable
        );
        // Present but not in the fact table.
        assert_eq!(
            oracle_answer(&without, "what does the cube eat").unwrap(),
            OracleOutcome::Unanswerable
        );
    }

    #[test]
    fn spatial_lookup_uses_one_based_coordinates() {
        let scene = scene_with(vec![SceneObject { cell: 6, shape: 3, color: 0, size: 1 }]);
        // cell 6 on a 4-grid is row 2, column 3.
        assert_eq!(
            oracle_answer(&scene, "what shape is in row 2 column 3").unwrap(),
            OracleOutcome::Answer("cylinder".into())
        );
        assert_eq!(
            oracle_answer(&scene, "what shape is in row 1 column 1").unwrap(),
            OracleOutcome::Unanswerable
        );
    }

    #[test]
    fn existence_is_always_answerable() {
        let scene = scene_with(vec![SceneObject { cell: 0, shape: 0, color: 0, size: 0 }]);
        assert_eq!(
            oracle_answer(&scene, "is there a red cube").unwrap(),
            OracleOutcome::Answer("yes".into())
        );
        assert_eq!(
            oracle_answer(&scene, "is there a blue cube").unwrap(),
            OracleOutcome::Answer("no".into())
        );
    }

    #[test]
    fn unknown_question_is_a_parse_error() {
        let scene = scene_with(vec![SceneObject { cell: 0, shape: 0, color: 0, size: 0 }]);
        assert!(oracle_answer(&scene, "what is the meaning of life").is_err());
        assert!(oracle_answer(&scene, "what color is the dragon").is_err());
    }

    #[test]
    fn matcher_inverts_every_surface() {
        let spec = WorldSpec::default_world();
        let q = ParsedQuestion {
            family: Family::ExistenceBoolean,
            surface: 0,
            shape: Some(1),
            color: Some(3),
            row: None,
            col: None,
        };
        for surface in 0..4 {
            let text = render_question(&spec, &q, surface);
            let parsed = match_question(&spec, &text).unwrap_or_else(|| panic!("{text}"));
            assert_eq!(parsed.family, q.family);
            assert_eq!(parsed.shape, q.shape);
            assert_eq!(parsed.color, q.color);
            assert_eq!(parsed.surface, surface);
        }
    }

    #[test]
    fn paraphrases_preserve_oracle_answers_across_random_scenes() {
        let spec = Arc::new(WorldSpec::default_world());
        let mut checked = 0usize;
        for seed in 0..1000 {
            let scene = generate_scene(&spec, seed);
            let mut rng = crate::seeding::stream_rng("paraphrase-test", &[seed]);
            for family in ALL_FAMILIES {
                let Some(q) = draw_question(&scene, family, &mut rng) else {
                    continue;
                };
                let canonical = answer_parsed(&scene, &q);
                for surface in 1..=PARAPHRASES_PER_FAMILY {
                    let text = render_question(&spec, &q, surface);
                    let answer = oracle_answer(&scene, &text).expect("paraphrase parses");
                    assert_eq!(answer, canonical, "family {family:?} surface {surface}: {text}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 10_000, "exercised {checked} paraphrase checks");
    }

    #[test]
    fn family_labels_round_trip() {
        for family in ALL_FAMILIES {
            assert_eq!(Family::from_label(family.label()), Some(family));
        }
    }
}
