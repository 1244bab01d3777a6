//! The self-agreement probe: how often does the model disagree with its own
//! perception as sampling gets more adventurous?
//!
//! For each top-p setting, the pretrained captioner samples a caption
//! phrase for an image, the phrase is wrapped into the fixed verification
//! question `is this a <caption>?`, and the student answers it about the
//! same image. Disagreement (any verdict other than "yes") is tracked as a
//! function of top-p, giving a label-free diagnostic of sampling
//! temperature — no oracle is consulted anywhere in the loop.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;

use crate::decoding::{decode_from_encoder, decode_sequence, DecodeMode, DecodingConfig};
use crate::model::{encode, Checkpoint, Lineage, BOS};
use crate::seeding::stream_rng;
use crate::synthworld::{encode_scene, scene_for_record, ImagePool, ImageTensor};
use crate::templating::{normalize_answer, serialize_caption_probe};

use super::EvalError;

/// The fixed caption prefix; sampling continues it with an object phrase.
const CAPTION_PROMPT: &str = "this is a";

/// Disagreement measured at one top-p setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub top_p: f64,
    /// Fraction of usable probes the answerer did not confirm with "yes".
    pub disagreement: f64,
    /// Usable probes behind the estimate; empty captions are skipped.
    pub n: usize,
}

/// Self-disagreement as a function of the captioner's sampling top-p.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementCurve {
    pub seed: u64,
    /// One point per grid entry, in the grid's (ascending) order.
    pub points: Vec<ProbePoint>,
}

impl AgreementCurve {
    /// Least-squares slope of disagreement against top-p: positive when
    /// looser sampling costs more self-agreement. Descriptive only — the
    /// curve is reported, not asserted against.
    pub fn slope(&self) -> f64 {
        if self.points.len() < 2 {
            return 0.0;
        }
        let n = self.points.len() as f64;
        let mean_x = self.points.iter().map(|p| p.top_p).sum::<f64>() / n;
        let mean_y = self.points.iter().map(|p| p.disagreement).sum::<f64>() / n;
        let cov: f64 =
            self.points.iter().map(|p| (p.top_p - mean_x) * (p.disagreement - mean_y)).sum();
        let var: f64 = self.points.iter().map(|p| (p.top_p - mean_x).powi(2)).sum();
        cov / var
    }
}

fn check_grid(grid: &[f64]) -> Result<(), EvalError> {
    if grid.is_empty() {
        return Err(EvalError::BadProbeGrid("grid is empty".to_string()));
    }
    for &p in grid {
        if !(p > 0.0 && p <= 1.0) {
            return Err(EvalError::BadProbeGrid(format!("top_p {p} outside (0, 1]")));
        }
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::BadProbeGrid("grid must be strictly increasing".to_string()));
    }
    Ok(())
}

/// Strips sentence punctuation out of a decoded caption and collapses it to
/// space-separated words; an empty result means the sample was unusable.
fn caption_phrase(raw: &str) -> String {
    raw.replace(['.', '?'], " ").split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Runs the self-agreement probe over a top-p grid.
///
/// `captioner` must be a pretrain-init checkpoint (the untouched captioning
/// initialization) and `answerer` a student; the probe refuses anything
/// else so curves are always comparable across runs. Every sample draws
/// from its own RNG stream keyed by image id, grid position, and repeat
/// index, so the curve is deterministic in `seed` and insensitive to probe
/// order. The verdict is read off the first answer token.
pub fn self_agreement_probe(
    captioner: &Checkpoint,
    answerer: &Checkpoint,
    pool: &ImagePool,
    top_p_grid: &[f64],
    n_per_point: usize,
    seed: u64,
) -> Result<AgreementCurve, EvalError> {
    if captioner.lineage != Lineage::PretrainInit {
        return Err(EvalError::WrongLineage {
            stage: "probe captioner",
            expected: Lineage::PretrainInit.label(),
            got: captioner.lineage.label(),
        });
    }
    if answerer.lineage != Lineage::Student {
        return Err(EvalError::WrongLineage {
            stage: "probe answerer",
            expected: Lineage::Student.label(),
            got: answerer.lineage.label(),
        });
    }
    if captioner.vocab != answerer.vocab {
        return Err(EvalError::VocabMismatch);
    }
    check_grid(top_p_grid)?;
    if n_per_point == 0 {
        return Err(EvalError::NoProbeSamples);
    }
    if pool.is_empty() {
        return Err(EvalError::EmptySplit("image pool".to_string()));
    }

    let spec = Arc::new(pool.world.clone());
    let mut prompt = vec![BOS];
    prompt.extend(captioner.vocab.tokenize(CAPTION_PROMPT)?);
    // The probe question wraps the phrase in "is this a … ?" (4 extra
    // tokens), so the caption budget is what the question window leaves.
    let budget = captioner.params.hyper.max_question_len.saturating_sub(4).max(1);
    let verdict_config = DecodingConfig {
        top_p: 1.0,
        temperature: 1.0,
        max_len: 1,
        seed,
        mode: DecodeMode::Greedy,
    };

    let mut images: HashMap<(u64, String), ImageTensor> = HashMap::new();
    let mut points = Vec::with_capacity(top_p_grid.len());
    let mut non_yes_no = 0usize;
    let mut total_usable = 0usize;

    for (point_idx, &top_p) in top_p_grid.iter().enumerate() {
        let caption_config = DecodingConfig {
            top_p,
            temperature: 1.0,
            max_len: budget,
            seed,
            mode: DecodeMode::Nucleus,
        };
        let mut usable = 0usize;
        let mut disagreements = 0usize;
        for i in 0..n_per_point {
            let image = &pool.images[i % pool.images.len()];
            let tensor = images
                .entry((image.scene_seed, image.style_tag.clone()))
                .or_insert_with(|| {
                    encode_scene(&scene_for_record(&spec, image.scene_seed, &image.style_tag))
                })
                .clone();
            let mut rng = stream_rng(
                &format!("probe/{}", image.image_id),
                &[seed, point_idx as u64, i as u64],
            );
            let caption =
                decode_sequence(&captioner.params, &tensor, &prompt, &caption_config, &mut rng)?;
            let phrase = caption_phrase(&captioner.vocab.detokenize(&caption.tokens));
            if phrase.is_empty() {
                continue;
            }
            let question = serialize_caption_probe(&phrase).expect("phrase is non-empty");
            let q_tokens = answerer.vocab.tokenize(&question)?;
            let enc = encode(&answerer.params, &tensor, Some(&q_tokens))?;
            let verdict =
                decode_from_encoder(&answerer.params, &enc, &[BOS], &verdict_config, &mut rng)?;
            usable += 1;
            match normalize_answer(&answerer.vocab.detokenize(&verdict.tokens)).as_str() {
                "yes" => {}
                "no" => disagreements += 1,
                _ => {
                    disagreements += 1;
                    non_yes_no += 1;
                }
            }
        }
        if usable == 0 {
            return Err(EvalError::NoUsableProbes(top_p));
        }
        total_usable += usable;
        points.push(ProbePoint {
            top_p,
            disagreement: disagreements as f64 / usable as f64,
            n: usable,
        });
    }

    if non_yes_no * 2 > total_usable {
        return Err(EvalError::DegenerateProbe { bad: non_yes_no, total: total_usable });
    }
    Ok(AgreementCurve { seed, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HyperParams, ModelParams, Vocabulary};
    use crate::synthworld::{build_corpus, WorldSpec};

    fn world() -> Arc<WorldSpec> {
        Arc::new(WorldSpec::default_world())
    }

    fn pool(n: usize) -> ImagePool {
        let (_, pool, _) = build_corpus(&world(), 0, n, 0, 51).unwrap();
        pool
    }

    fn tiny_checkpoint(spec: &WorldSpec, lineage: Lineage, seed: u64) -> Checkpoint {
        let vocab = Vocabulary::for_world(spec);
        let hyper = HyperParams::tiny_for(spec, &vocab);
        let params = ModelParams::<f32>::init(hyper, seed).unwrap();
        Checkpoint { lineage, config_hash: "test".to_string(), step: 0, vocab, params }
    }

    /// Zeroed weights with one output bias spiked: the decoder emits `word`
    /// at every step regardless of input.
    fn constant_checkpoint(spec: &WorldSpec, lineage: Lineage, word: &str) -> Checkpoint {
        let mut ckpt = tiny_checkpoint(spec, lineage, 0);
        let id = ckpt.vocab.id_of(word).expect("word in vocabulary");
        ckpt.params.scale(0.0);
        ckpt.params.output_b[[0, id]] = 25.0;
        ckpt
    }

    const GRID: [f64; 3] = [0.5, 0.9, 1.0];

    #[test]
    fn lineage_guards_reject_misused_checkpoints() {
        let spec = world();
        let student = tiny_checkpoint(&spec, Lineage::Student, 1);
        let init = tiny_checkpoint(&spec, Lineage::PretrainInit, 2);
        let err =
            self_agreement_probe(&student, &student, &pool(4), &GRID, 2, 0).unwrap_err();
        assert!(matches!(
            err,
            EvalError::WrongLineage { stage: "probe captioner", .. }
        ));
        let err = self_agreement_probe(&init, &init, &pool(4), &GRID, 2, 0).unwrap_err();
        assert!(matches!(
            err,
            EvalError::WrongLineage { stage: "probe answerer", .. }
        ));
    }

    #[test]
    fn grid_and_sample_guards_reject_bad_inputs() {
        let spec = world();
        let init = tiny_checkpoint(&spec, Lineage::PretrainInit, 1);
        let student = tiny_checkpoint(&spec, Lineage::Student, 2);
        let images = pool(4);

        for bad in [vec![], vec![0.0], vec![1.2], vec![0.9, 0.5], vec![0.5, 0.5]] {
            let err =
                self_agreement_probe(&init, &student, &images, &bad, 2, 0).unwrap_err();
            assert!(matches!(err, EvalError::BadProbeGrid(_)), "grid {bad:?}");
        }
        let err = self_agreement_probe(&init, &student, &images, &GRID, 0, 0).unwrap_err();
        assert!(matches!(err, EvalError::NoProbeSamples));
        let empty = ImagePool { world: WorldSpec::default_world(), images: vec![] };
        let err = self_agreement_probe(&init, &student, &empty, &GRID, 2, 0).unwrap_err();
        assert!(matches!(err, EvalError::EmptySplit(_)));
    }

    #[test]
    fn vocabulary_mismatch_is_rejected() {
        let spec = world();
        let mut other = WorldSpec::default_world();
        other.color_vocab.push("magenta".to_string());
        let init = tiny_checkpoint(&other, Lineage::PretrainInit, 1);
        let student = tiny_checkpoint(&spec, Lineage::Student, 2);
        let err = self_agreement_probe(&init, &student, &pool(4), &GRID, 2, 0).unwrap_err();
        assert!(matches!(err, EvalError::VocabMismatch));
    }

    #[test]
    fn constant_yes_answerer_never_disagrees() {
        let spec = world();
        let init = tiny_checkpoint(&spec, Lineage::PretrainInit, 3);
        let student = constant_checkpoint(&spec, Lineage::Student, "yes");
        let curve = self_agreement_probe(&init, &student, &pool(6), &GRID, 4, 7).unwrap();
        assert_eq!(curve.points.len(), GRID.len());
        for (point, &p) in curve.points.iter().zip(GRID.iter()) {
            assert_eq!(point.top_p, p);
            assert_eq!(point.disagreement, 0.0);
            assert!(point.n >= 1 && point.n <= 4);
        }
        assert_eq!(curve.slope(), 0.0);
    }

    #[test]
    fn constant_no_answerer_always_disagrees_without_degenerating() {
        let spec = world();
        let init = tiny_checkpoint(&spec, Lineage::PretrainInit, 3);
        let student = constant_checkpoint(&spec, Lineage::Student, "no");
        let curve = self_agreement_probe(&init, &student, &pool(6), &GRID, 4, 7).unwrap();
        assert!(curve.points.iter().all(|p| p.disagreement == 1.0));
    }

    #[test]
    fn off_scale_answers_degenerate_the_probe() {
        let spec = world();
        let init = tiny_checkpoint(&spec, Lineage::PretrainInit, 3);
        let student = constant_checkpoint(&spec, Lineage::Student, "red");
        let err = self_agreement_probe(&init, &student, &pool(6), &GRID, 4, 7).unwrap_err();
        assert!(matches!(err, EvalError::DegenerateProbe { bad, total } if bad == total));
    }

    #[test]
    fn the_curve_is_deterministic_in_the_seed() {
        let spec = world();
        let init = tiny_checkpoint(&spec, Lineage::PretrainInit, 3);
        let student = constant_checkpoint(&spec, Lineage::Student, "yes");
        let a = self_agreement_probe(&init, &student, &pool(6), &GRID, 4, 9).unwrap();
        let b = self_agreement_probe(&init, &student, &pool(6), &GRID, 4, 9).unwrap();
        assert_eq!(a, b);
        let c = self_agreement_probe(&init, &student, &pool(6), &GRID, 4, 10).unwrap();
        assert_eq!(c.points.len(), a.points.len(), "different seed still covers the grid");
    }

    #[test]
    fn slope_summarizes_the_direction_of_the_curve() {
        let rising = AgreementCurve {
            seed: 0,
            points: vec![
                ProbePoint { top_p: 0.5, disagreement: 0.1, n: 10 },
                ProbePoint { top_p: 1.0, disagreement: 0.3, n: 10 },
            ],
        };
        assert!((rising.slope() - 0.4).abs() < 1e-12);
        let flat = AgreementCurve {
            seed: 0,
            points: vec![ProbePoint { top_p: 0.5, disagreement: 0.2, n: 10 }],
        };
        assert_eq!(flat.slope(), 0.0);
    }
}
