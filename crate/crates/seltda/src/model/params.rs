//! Parameter containers, initialization, and checkpoint persistence.
//!
//! Everything is an `Array2` — biases and norm scales are `(1, n)` rows —
//! so the optimizer, gradient checks, and serialization can treat the model
//! as one flat list of tensors in a single canonical order.

use std::fmt::{Debug, Display};
use std::path::Path;

use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::model::Vocabulary;
use crate::seeding::stream_rng;
use crate::synthworld::WorldSpec;

/// Scalar type the model is parameterized over: `f32` for training speed,
/// `f64` when gradients are checked against finite differences.
pub trait Element:
    LinalgScalar
    + Float
    + ScalarOperand
    + FromPrimitive
    + std::ops::AddAssign
    + Serialize
    + DeserializeOwned
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn as_f64(self) -> f64;
    fn cast(value: f64) -> Self;
}

impl Element for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn cast(value: f64) -> Self {
        value as f32
    }
}

impl Element for f64 {
    fn as_f64(self) -> f64 {
        self
    }
    fn cast(value: f64) -> Self {
        value
    }
}

/// Architecture description carried alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperParams {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    /// Per-cell feature width of the image tensors this model accepts.
    pub feature_dim: usize,
    /// Grid cells, i.e. encoder positions contributed by the image.
    pub n_cells: usize,
    pub max_question_len: usize,
    pub max_target_len: usize,
    pub vocab_size: usize,
}

impl HyperParams {
    /// The default desk-scale architecture for a world/vocabulary pair.
    pub fn default_for(world: &WorldSpec, vocab: &Vocabulary) -> HyperParams {
        HyperParams {
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            n_enc_layers: 2,
            n_dec_layers: 2,
            feature_dim: world.feature_dim(),
            n_cells: world.cells(),
            max_question_len: 16,
            max_target_len: 32,
            vocab_size: vocab.len(),
        }
    }

    /// A deliberately tiny variant for finite-difference gradient checks,
    /// keeping the full two-layer depth so every code path is exercised.
    pub fn tiny_for(world: &WorldSpec, vocab: &Vocabulary) -> HyperParams {
        HyperParams {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            ..HyperParams::default_for(world, vocab)
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0
            || self.n_heads == 0
            || !self.d_model.is_multiple_of(self.n_heads)
            || self.d_ff == 0
            || self.n_enc_layers == 0
            || self.n_dec_layers == 0
            || self.feature_dim == 0
            || self.n_cells == 0
            || self.max_question_len == 0
            || self.max_target_len == 0
            || self.vocab_size <= crate::model::SEP
        {
            return Err(ModelError::BadHyperParams);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams<E> {
    pub gamma: Array2<E>,
    pub beta: Array2<E>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams<E> {
    pub wq: Array2<E>,
    pub bq: Array2<E>,
    pub wk: Array2<E>,
    pub bk: Array2<E>,
    pub wv: Array2<E>,
    pub bv: Array2<E>,
    pub wo: Array2<E>,
    pub bo: Array2<E>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedForwardParams<E> {
    pub w1: Array2<E>,
    pub b1: Array2<E>,
    pub w2: Array2<E>,
    pub b2: Array2<E>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayerParams<E> {
    pub norm1: LayerNormParams<E>,
    pub attn: AttentionParams<E>,
    pub norm2: LayerNormParams<E>,
    pub ff: FeedForwardParams<E>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayerParams<E> {
    pub norm1: LayerNormParams<E>,
    pub self_attn: AttentionParams<E>,
    pub norm2: LayerNormParams<E>,
    pub cross_attn: AttentionParams<E>,
    pub norm3: LayerNormParams<E>,
    pub ff: FeedForwardParams<E>,
}

/// All weights of the encoder-decoder model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<E> {
    pub hyper: HyperParams,
    /// Shared token table for encoder questions and decoder inputs; (V, d).
    pub token_embedding: Array2<E>,
    /// Projects per-cell image features into the model; (feature_dim, d).
    pub feature_proj_w: Array2<E>,
    pub feature_proj_b: Array2<E>,
    /// Learned position embeddings for grid cells, question tokens, and
    /// decoder positions: (n_cells, d), (max_question_len, d),
    /// (max_target_len, d).
    pub pos_grid: Array2<E>,
    pub pos_question: Array2<E>,
    pub pos_decoder: Array2<E>,
    pub encoder: Vec<EncoderLayerParams<E>>,
    pub decoder: Vec<DecoderLayerParams<E>>,
    pub final_norm: LayerNormParams<E>,
    pub output_w: Array2<E>,
    pub output_b: Array2<E>,
}

/// Standard deviation of the normal init for weights and embeddings.
const INIT_STD: f64 = 0.02;

/// One draw from N(0, 1) via Box-Muller.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1], keeps the log finite
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn normal_matrix<E: Element>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<E> {
    Array2::from_shape_fn((rows, cols), |_| E::cast(standard_normal(rng) * INIT_STD))
}

fn zero_row<E: Element>(cols: usize) -> Array2<E> {
    Array2::zeros((1, cols))
}

impl<E: Element> LayerNormParams<E> {
    fn identity(d: usize) -> Self {
        LayerNormParams { gamma: Array2::ones((1, d)), beta: zero_row(d) }
    }
}

impl<E: Element> AttentionParams<E> {
    fn init(rng: &mut ChaCha8Rng, d: usize) -> Self {
        AttentionParams {
            wq: normal_matrix(rng, d, d),
            bq: zero_row(d),
            wk: normal_matrix(rng, d, d),
            bk: zero_row(d),
            wv: normal_matrix(rng, d, d),
            bv: zero_row(d),
            wo: normal_matrix(rng, d, d),
            bo: zero_row(d),
        }
    }
}

impl<E: Element> FeedForwardParams<E> {
    fn init(rng: &mut ChaCha8Rng, d: usize, d_ff: usize) -> Self {
        FeedForwardParams {
            w1: normal_matrix(rng, d, d_ff),
            b1: zero_row(d_ff),
            w2: normal_matrix(rng, d_ff, d),
            b2: zero_row(d),
        }
    }
}

impl<E: Element> ModelParams<E> {
    /// Fresh random initialization: N(0, 0.02²) weights, zero biases,
    /// identity layer norms. Deterministic in (hyper, seed).
    pub fn init(hyper: HyperParams, seed: u64) -> Result<ModelParams<E>, ModelError> {
        hyper.validate()?;
        let rng = &mut stream_rng("model-init", &[seed]);
        let d = hyper.d_model;
        let encoder = (0..hyper.n_enc_layers)
            .map(|_| EncoderLayerParams {
                norm1: LayerNormParams::identity(d),
                attn: AttentionParams::init(rng, d),
                norm2: LayerNormParams::identity(d),
                ff: FeedForwardParams::init(rng, d, hyper.d_ff),
            })
            .collect();
        let decoder = (0..hyper.n_dec_layers)
            .map(|_| DecoderLayerParams {
                norm1: LayerNormParams::identity(d),
                self_attn: AttentionParams::init(rng, d),
                norm2: LayerNormParams::identity(d),
                cross_attn: AttentionParams::init(rng, d),
                norm3: LayerNormParams::identity(d),
                ff: FeedForwardParams::init(rng, d, hyper.d_ff),
            })
            .collect();
        Ok(ModelParams {
            hyper,
            token_embedding: normal_matrix(rng, hyper.vocab_size, d),
            feature_proj_w: normal_matrix(rng, hyper.feature_dim, d),
            feature_proj_b: zero_row(d),
            pos_grid: normal_matrix(rng, hyper.n_cells, d),
            pos_question: normal_matrix(rng, hyper.max_question_len, d),
            pos_decoder: normal_matrix(rng, hyper.max_target_len, d),
            encoder,
            decoder,
            final_norm: LayerNormParams::identity(d),
            output_w: normal_matrix(rng, d, hyper.vocab_size),
            output_b: zero_row(hyper.vocab_size),
        })
    }

    /// Same structure with every tensor zeroed; the gradient accumulator.
    pub fn zeros_like(&self) -> ModelParams<E> {
        let mut zeros = self.clone();
        for tensor in zeros.tensors_mut() {
            tensor.fill(E::zero());
        }
        zeros
    }

    /// Every tensor in the canonical order used by the optimizer,
    /// serialization, and gradient checks.
    pub fn tensors(&self) -> Vec<&Array2<E>> {
        let mut out: Vec<&Array2<E>> = vec![
            &self.token_embedding,
            &self.feature_proj_w,
            &self.feature_proj_b,
            &self.pos_grid,
            &self.pos_question,
            &self.pos_decoder,
        ];
        for layer in &self.encoder {
            out.extend([&layer.norm1.gamma, &layer.norm1.beta]);
            out.extend(attn_tensors(&layer.attn));
            out.extend([&layer.norm2.gamma, &layer.norm2.beta]);
            out.extend(ff_tensors(&layer.ff));
        }
        for layer in &self.decoder {
            out.extend([&layer.norm1.gamma, &layer.norm1.beta]);
            out.extend(attn_tensors(&layer.self_attn));
            out.extend([&layer.norm2.gamma, &layer.norm2.beta]);
            out.extend(attn_tensors(&layer.cross_attn));
            out.extend([&layer.norm3.gamma, &layer.norm3.beta]);
            out.extend(ff_tensors(&layer.ff));
        }
        out.extend([&self.final_norm.gamma, &self.final_norm.beta, &self.output_w, &self.output_b]);
        out
    }

    /// Mutable view in the same canonical order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<E>> {
        let mut out: Vec<&mut Array2<E>> = vec![
            &mut self.token_embedding,
            &mut self.feature_proj_w,
            &mut self.feature_proj_b,
            &mut self.pos_grid,
            &mut self.pos_question,
            &mut self.pos_decoder,
        ];
        for layer in &mut self.encoder {
            out.extend([&mut layer.norm1.gamma, &mut layer.norm1.beta]);
            out.extend(attn_tensors_mut(&mut layer.attn));
            out.extend([&mut layer.norm2.gamma, &mut layer.norm2.beta]);
            out.extend(ff_tensors_mut(&mut layer.ff));
        }
        for layer in &mut self.decoder {
            out.extend([&mut layer.norm1.gamma, &mut layer.norm1.beta]);
            out.extend(attn_tensors_mut(&mut layer.self_attn));
            out.extend([&mut layer.norm2.gamma, &mut layer.norm2.beta]);
            out.extend(attn_tensors_mut(&mut layer.cross_attn));
            out.extend([&mut layer.norm3.gamma, &mut layer.norm3.beta]);
            out.extend(ff_tensors_mut(&mut layer.ff));
        }
        out.extend([
            &mut self.final_norm.gamma,
            &mut self.final_norm.beta,
            &mut self.output_w,
            &mut self.output_b,
        ]);
        out
    }

    /// Names parallel to [`ModelParams::tensors`], for diagnostics.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec![
            "token_embedding".to_string(),
            "feature_proj_w".to_string(),
            "feature_proj_b".to_string(),
            "pos_grid".to_string(),
            "pos_question".to_string(),
            "pos_decoder".to_string(),
        ];
        let attn = |prefix: &str| {
            ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"]
                .map(|n| format!("{prefix}.{n}"))
                .to_vec()
        };
        let norm = |prefix: &str| [format!("{prefix}.gamma"), format!("{prefix}.beta")].to_vec();
        let ff = |prefix: &str| {
            ["w1", "b1", "w2", "b2"].map(|n| format!("{prefix}.{n}")).to_vec()
        };
        for i in 0..self.encoder.len() {
            out.extend(norm(&format!("enc{i}.norm1")));
            out.extend(attn(&format!("enc{i}.attn")));
            out.extend(norm(&format!("enc{i}.norm2")));
            out.extend(ff(&format!("enc{i}.ff")));
        }
        for i in 0..self.decoder.len() {
            out.extend(norm(&format!("dec{i}.norm1")));
            out.extend(attn(&format!("dec{i}.self_attn")));
            out.extend(norm(&format!("dec{i}.norm2")));
            out.extend(attn(&format!("dec{i}.cross_attn")));
            out.extend(norm(&format!("dec{i}.norm3")));
            out.extend(ff(&format!("dec{i}.ff")));
        }
        out.extend(norm("final_norm"));
        out.push("output_w".to_string());
        out.push("output_b".to_string());
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += a · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams<E>, a: E) {
        let theirs = other.tensors();
        for (mine, other) in self.tensors_mut().into_iter().zip(theirs) {
            mine.zip_mut_with(other, |m, &o| *m += a * o);
        }
    }

    pub fn scale(&mut self, a: E) {
        for tensor in self.tensors_mut() {
            tensor.mapv_inplace(|v| v * a);
        }
    }

    /// Errors with the offending tensor's name if any entry is non-finite.
    pub fn assert_finite(&self) -> Result<(), ModelError> {
        for (name, tensor) in self.tensor_names().into_iter().zip(self.tensors()) {
            if tensor.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite(name));
            }
        }
        Ok(())
    }
}

fn attn_tensors<E>(attn: &AttentionParams<E>) -> [&Array2<E>; 8] {
    [&attn.wq, &attn.bq, &attn.wk, &attn.bk, &attn.wv, &attn.bv, &attn.wo, &attn.bo]
}

fn attn_tensors_mut<E>(attn: &mut AttentionParams<E>) -> [&mut Array2<E>; 8] {
    [
        &mut attn.wq,
        &mut attn.bq,
        &mut attn.wk,
        &mut attn.bk,
        &mut attn.wv,
        &mut attn.bv,
        &mut attn.wo,
        &mut attn.bo,
    ]
}

fn ff_tensors<E>(ff: &FeedForwardParams<E>) -> [&Array2<E>; 4] {
    [&ff.w1, &ff.b1, &ff.w2, &ff.b2]
}

fn ff_tensors_mut<E>(ff: &mut FeedForwardParams<E>) -> [&mut Array2<E>; 4] {
    [&mut ff.w1, &mut ff.b1, &mut ff.w2, &mut ff.b2]
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// What role produced a checkpoint. The student trainer refuses anything
/// but `PretrainInit`, which is the whole point of the tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Lineage {
    PretrainInit,
    Teacher,
    Student,
}

impl Lineage {
    pub fn label(&self) -> &'static str {
        match self {
            Lineage::PretrainInit => "pretrain-init",
            Lineage::Teacher => "teacher",
            Lineage::Student => "student",
        }
    }
}

/// Self-describing weights container persisted as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub lineage: Lineage,
    /// Hash of the config scope that determined these weights; derived
    /// checkpoints inherit it from the checkpoint they started from.
    pub config_hash: String,
    /// Optimizer steps taken to reach this state.
    pub step: u64,
    pub vocab: Vocabulary,
    pub params: ModelParams<f32>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let json = serde_json::to_vec(self).expect("checkpoint serializes");
        crate::pipeline::atomic_write(path, &json)
            .map_err(|source| ModelError::CheckpointIo { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Checkpoint, ModelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ModelError::CheckpointIo { path: path.display().to_string(), source })?;
        let mut checkpoint: Checkpoint = serde_json::from_str(&text).map_err(|source| {
            ModelError::CheckpointFormat { path: path.display().to_string(), source }
        })?;
        checkpoint.vocab.reindex();
        checkpoint.params.hyper.validate()?;
        Ok(checkpoint)
    }
}
