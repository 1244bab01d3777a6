//! Autoregressive decoding: nucleus (top-p) filtering, inverse-CDF
//! sampling, and the greedy/stochastic generation loop.
//!
//! All probability arithmetic here is `f64` regardless of the model's
//! training element type, so sampling behavior never depends on which
//! precision the weights happen to be stored in.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{decode_logits, encode, Element, EncoderOutput, ModelError, ModelParams, BOS};
use crate::synthworld::ImageTensor;

/// Tolerance for "sums to 1" checks on distributions.
const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DecodingError {
    #[error("top_p must lie in (0, 1], got {0}")]
    TopPOutOfRange(f64),
    #[error("temperature must be positive and finite, got {0}")]
    TemperatureOutOfRange(f64),
    #[error("max_len must be ≥ 1")]
    ZeroMaxLen,
    #[error("invalid probability vector: {0}")]
    InvalidDistribution(&'static str),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// How the next token is chosen at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    Nucleus,
    Greedy,
}

/// Knobs for one decoding run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingConfig {
    /// Nucleus mass; 1.0 keeps the full distribution.
    pub top_p: f64,
    /// Applied to logits before the softmax (`logits / temperature`).
    pub temperature: f64,
    /// Hard cap on generated tokens (excluding the prompt).
    pub max_len: usize,
    /// Base seed from which per-image sample streams are derived.
    pub seed: u64,
    pub mode: DecodeMode,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        DecodingConfig {
            top_p: 0.92,
            temperature: 1.0,
            max_len: 32,
            seed: 0,
            mode: DecodeMode::Nucleus,
        }
    }
}

impl DecodingConfig {
    pub fn validate(&self) -> Result<(), DecodingError> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(DecodingError::TopPOutOfRange(self.top_p));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(DecodingError::TemperatureOutOfRange(self.temperature));
        }
        if self.max_len == 0 {
            return Err(DecodingError::ZeroMaxLen);
        }
        Ok(())
    }
}

/// A distribution over token ids: non-negative entries summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    /// Validates non-negativity, finiteness, and unit mass.
    pub fn try_new(values: Vec<f64>) -> Result<ProbabilityVector, DecodingError> {
        if values.is_empty() {
            return Err(DecodingError::InvalidDistribution("empty"));
        }
        if values.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(DecodingError::InvalidDistribution("negative or non-finite entry"));
        }
        let mass: f64 = values.iter().sum();
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(DecodingError::InvalidDistribution("mass not within 1e-9 of 1"));
        }
        Ok(ProbabilityVector(values))
    }

    /// Wraps values known to be normalized (e.g. fresh softmax output).
    fn from_normalized(values: Vec<f64>) -> ProbabilityVector {
        debug_assert!(
            ProbabilityVector::try_new(values.clone()).is_ok(),
            "constructor bypassed with an invalid distribution"
        );
        ProbabilityVector(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Ids with nonzero probability.
    pub fn support(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(id, _)| id)
            .collect()
    }
}

/// Temperature-scaled softmax in `f64` with max subtraction.
pub fn softmax(logits: &[f64], temperature: f64) -> ProbabilityVector {
    assert!(!logits.is_empty(), "softmax over an empty logit vector");
    assert!(temperature > 0.0, "temperature must be positive");
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / temperature));
    let exps: Vec<f64> = logits.iter().map(|&l| (l / temperature - max).exp()).collect();
    let mass: f64 = exps.iter().sum();
    ProbabilityVector::from_normalized(exps.iter().map(|&e| e / mass).collect())
}

/// Keeps the smallest set of highest-probability tokens whose cumulative
/// mass reaches `p`, renormalizes it to 1, and zeroes the rest. Sorting is
/// by descending probability with ties broken by ascending token id, so the
/// kept set is a deterministic function of the input. `p = 1` returns the
/// input unchanged (no renormalization noise on the full nucleus).
pub fn top_p_filter(probs: &ProbabilityVector, p: f64) -> ProbabilityVector {
    assert!(p > 0.0 && p <= 1.0, "top_p must lie in (0, 1], got {p}");
    if p >= 1.0 {
        return probs.clone();
    }
    let values = probs.values();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b].partial_cmp(&values[a]).expect("finite probabilities").then(a.cmp(&b))
    });

    let mut kept_mass = 0.0;
    let mut kept = Vec::new();
    for &id in &order {
        kept_mass += values[id];
        kept.push(id);
        if kept_mass >= p {
            break;
        }
    }

    let mut filtered = vec![0.0; values.len()];
    for &id in &kept {
        filtered[id] = values[id] / kept_mass;
    }
    ProbabilityVector::from_normalized(filtered)
}

/// Draws one token by inverse CDF over ascending token id: the cumulative
/// sum is walked in id order and the first id whose cumulative mass exceeds
/// the uniform draw wins.
pub fn sample_token(probs: &ProbabilityVector, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut cumulative = 0.0;
    let mut last_nonzero = 0;
    for (id, &prob) in probs.values().iter().enumerate() {
        if prob > 0.0 {
            last_nonzero = id;
            cumulative += prob;
            if u < cumulative {
                return id;
            }
        }
    }
    // Rounding can leave the final cumulative a hair under 1.0; the draw
    // then belongs to the last token with mass.
    last_nonzero
}

/// Argmax with ties broken by lowest token id.
pub fn greedy_token(probs: &ProbabilityVector) -> usize {
    let mut best = 0;
    for (id, &prob) in probs.values().iter().enumerate() {
        if prob > probs.values()[best] {
            best = id;
        }
    }
    best
}

/// One decoded continuation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    /// Generated token ids, excluding the prompt and the terminating EOS.
    pub tokens: Vec<usize>,
    /// True when the loop hit `max_len` without emitting EOS.
    pub truncated: bool,
}

/// Core generation loop over an arbitrary next-token logit source. The
/// closure receives the tokens generated so far (prompt handling is the
/// caller's business) and returns one logit per vocabulary entry. Used by
/// the model-bound decode entry point and directly by tests.
pub fn decode_with<F>(
    mut next_logits: F,
    eos_id: usize,
    config: &DecodingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Decoded, DecodingError>
where
    F: FnMut(&[usize]) -> Vec<f64>,
{
    config.validate()?;
    let mut tokens = Vec::new();
    loop {
        let logits = next_logits(&tokens);
        let probs = softmax(&logits, config.temperature);
        let token = match config.mode {
            DecodeMode::Nucleus => sample_token(&top_p_filter(&probs, config.top_p), rng),
            DecodeMode::Greedy => greedy_token(&probs),
        };
        if token == eos_id {
            return Ok(Decoded { tokens, truncated: false });
        }
        tokens.push(token);
        if tokens.len() == config.max_len {
            return Ok(Decoded { tokens, truncated: true });
        }
    }
}

/// Continues a BOS-prefixed decoder prompt against a fixed encoder output.
/// The decoder pass is recomputed from scratch at every step — quadratic in
/// sequence length, which is immaterial at these sizes and keeps a single
/// forward implementation.
pub fn decode_from_encoder<E: Element>(
    params: &ModelParams<E>,
    enc: &EncoderOutput<E>,
    prompt_tokens: &[usize],
    config: &DecodingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Decoded, DecodingError> {
    config.validate()?;
    debug_assert_eq!(prompt_tokens.first(), Some(&BOS), "prompt must begin with BOS");
    let max_target = params.hyper.max_target_len;
    if prompt_tokens.len() > max_target {
        return Err(ModelError::LengthError {
            what: "prompt",
            got: prompt_tokens.len(),
            max: max_target,
        }
        .into());
    }
    for &t in prompt_tokens {
        if t >= params.hyper.vocab_size {
            return Err(ModelError::TokenOutOfRange(t).into());
        }
    }
    // The decoder input may not outgrow the model's position table, so the
    // generation budget is the smaller of the configured cap and the room
    // the prompt leaves.
    let room = max_target - prompt_tokens.len();
    if room == 0 {
        return Ok(Decoded { tokens: Vec::new(), truncated: true });
    }
    let effective = DecodingConfig { max_len: config.max_len.min(room), ..config.clone() };
    let next_logits = |generated: &[usize]| {
        let mut dec_in = Vec::with_capacity(prompt_tokens.len() + generated.len());
        dec_in.extend_from_slice(prompt_tokens);
        dec_in.extend_from_slice(generated);
        let logits = decode_logits(params, enc, &dec_in)
            .expect("prompt and generated tokens were validated");
        logits.row(logits.nrows() - 1).iter().map(|v| v.as_f64()).collect()
    };
    decode_with(next_logits, crate::model::EOS, &effective, rng)
}

/// Generates a token sequence conditioned on the image alone: the
/// image-conditional question-generation (and captioning) entry point.
/// Returned tokens exclude the prompt and the terminating EOS.
pub fn decode_sequence<E: Element>(
    params: &ModelParams<E>,
    image: &ImageTensor,
    prompt_tokens: &[usize],
    config: &DecodingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Decoded, DecodingError> {
    let enc = encode(params, image, None)?;
    decode_from_encoder(params, &enc, prompt_tokens, config, rng)
}
