//! The generic fit loop and caption pretraining.
//!
//! `fit` drives any batch of [`SequenceExample`]s under either loss: it
//! shuffles per epoch from a named RNG stream, averages gradients across
//! each batch, and steps the optimizer on its linear schedule sized to
//! exactly the number of batches it will see. `pretrain_init` uses that
//! loop to teach a fresh model to caption scenes, producing the shared
//! initialization that both the question-generation and answering stages
//! later start from.

use std::sync::Arc;

use rand::seq::SliceRandom;

use super::loss::{accumulate_example_gradient, vqg_loss, LossKind, SequenceExample};
use super::optim::{optimizer_step, OptimizerState, TrainConfig};
use super::params::{Element, HyperParams, ModelParams};
use super::vocab::Vocabulary;
use super::ModelError;
use crate::seeding::{derive_seed, stream_rng};
use crate::synthworld::{encode_scene, generate_scene, scene_caption, WorldSpec};

/// Most objects a pretraining caption mentions. Five keeps the longest
/// caption (5·5 + 3 tokens including EOS) inside the decoder's position
/// table.
pub const PRETRAIN_CAPTION_OBJECTS: usize = 5;

/// Per-epoch mean example loss, recorded over a whole `fit` run, plus the
/// number of optimizer steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

impl FitReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Trains `params` in place over the examples and reports the loss curve.
/// `stage` names the shuffle stream so different training stages with the
/// same seed still see different orderings.
pub fn fit<E: Element>(
    params: &mut ModelParams<E>,
    kind: LossKind,
    examples: &[SequenceExample],
    config: &TrainConfig,
    stage: &str,
) -> Result<FitReport, ModelError> {
    if examples.is_empty() || config.epochs == 0 {
        return Ok(FitReport { epoch_losses: Vec::new(), steps: 0 });
    }
    let batch_size = config.batch_size.max(1);
    let batches_per_epoch = examples.len().div_ceil(batch_size);
    let total_steps = (config.epochs * batches_per_epoch) as u64;
    let mut state = OptimizerState::new(params, total_steps);

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = stream_rng(&format!("train/{stage}/shuffle"), &[config.seed, epoch as u64]);
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(batch_size) {
            let mut grads = ModelParams::zeros_like(params);
            let scale = 1.0 / chunk.len() as f64;
            for &idx in chunk {
                epoch_loss +=
                    accumulate_example_gradient(params, kind, &examples[idx], scale, &mut grads)?;
            }
            grads.assert_finite()?;
            optimizer_step(params, &grads, &mut state, config)?;
        }
        epoch_losses.push(epoch_loss / examples.len() as f64);
    }
    Ok(FitReport { epoch_losses, steps: state.step })
}

/// What caption pretraining produced: the trained weights, the vocabulary
/// they index, and the loss record (including the pre-training loss, so
/// improvement is checkable).
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ModelParams<f32>,
    pub vocab: Vocabulary,
    pub hyper: HyperParams,
    pub initial_loss: f64,
    pub report: FitReport,
}

/// Builds the caption corpus for pretraining: one scene per index, each
/// captioned deterministically.
pub fn caption_examples(
    spec: &Arc<WorldSpec>,
    vocab: &Vocabulary,
    n_scenes: usize,
    seed: u64,
) -> Vec<SequenceExample> {
    (0..n_scenes as u64)
        .map(|i| {
            let scene = generate_scene(spec, derive_seed("pretrain/scene", &[seed, i]));
            let caption = scene_caption(&scene, PRETRAIN_CAPTION_OBJECTS);
            let targets = vocab
                .tokenize(&caption)
                .expect("captions only use words from the world vocabulary");
            SequenceExample { image: encode_scene(&scene), question: None, targets }
        })
        .collect()
}

/// Trains a fresh model to caption random scenes from the world. The
/// resulting weights are the common ancestor for every later stage: the
/// question generator is tuned from here, and so is the answering model —
/// never from each other.
pub fn pretrain_init(
    spec: &Arc<WorldSpec>,
    config: &TrainConfig,
    n_scenes: usize,
    seed: u64,
) -> Result<PretrainOutcome, ModelError> {
    let vocab = Vocabulary::for_world(spec);
    let hyper = HyperParams::default_for(spec, &vocab);
    let mut params = ModelParams::<f32>::init(hyper, seed)?;

    let examples = caption_examples(spec, &vocab, n_scenes, seed);
    let mut initial_loss = 0.0f64;
    for ex in &examples {
        initial_loss += vqg_loss(&params, &ex.image, &ex.targets)?;
    }
    if !examples.is_empty() {
        initial_loss /= examples.len() as f64;
    }

    let report = fit(&mut params, LossKind::QuestionGeneration, &examples, config, "pretrain")?;
    Ok(PretrainOutcome { params, vocab, hyper, initial_loss, report })
}
