//! A miniature encoder-decoder multimodal transformer with exact
//! reverse-mode gradients, the sequence losses for question generation and
//! answering, and the AdamW-style optimizer with a linear decay schedule.
//!
//! Weights are generic over the element type so training can run in `f32`
//! while finite-difference gradient checks run in `f64`; loss reductions
//! and decoding math always accumulate in `f64`.

use thiserror::Error;

pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;
pub mod train;
pub mod vocab;

pub use layers::{decode_logits, encode, EncodeMode, EncoderOutput};
pub use loss::{gradient, sequence_nll, vqa_loss, vqg_loss, LossKind, SequenceExample};
pub use optim::{optimizer_step, schedule_lr, OptimizerState, TrainConfig};
pub use train::{fit, pretrain_init, FitReport, PretrainOutcome};
pub use params::{
    AttentionParams, Checkpoint, DecoderLayerParams, Element, EncoderLayerParams,
    FeedForwardParams, HyperParams, LayerNormParams, Lineage, ModelParams,
};
pub use vocab::{VocabError, Vocabulary, BOS, EOS, PAD, SEP};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("hyperparameters are inconsistent (zero sizes or heads not dividing d_model)")]
    BadHyperParams,
    #[error("image feature dimension {got} does not match the model's {want}")]
    ShapeMismatch { got: usize, want: usize },
    #[error("{what} length {got} exceeds the maximum {max}")]
    LengthError { what: &'static str, got: usize, max: usize },
    #[error("token id {0} is outside the vocabulary")]
    TokenOutOfRange(usize),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("optimizer schedule exhausted: step {step} is past the total {total}")]
    ScheduleExhausted { step: u64, total: u64 },
    #[error("checkpoint io failed for {path}")]
    CheckpointIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint at {path} is malformed")]
    CheckpointFormat {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}
