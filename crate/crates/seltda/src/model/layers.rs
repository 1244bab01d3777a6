//! Forward and exact reverse-mode backward passes for every layer, plus the
//! public `encode` / `decode_logits` entry points.
//!
//! Each training example is processed at its true sequence length — there
//! is no intra-example padding, so attention needs no padding masks, only
//! the causal mask in the decoder's self-attention. Backward functions
//! accumulate (`+=`) into a gradient structure shaped like the parameters,
//! which makes batch accumulation a plain loop over examples.

use ndarray::{s, Array1, Array2, Axis};

use super::params::{
    AttentionParams, DecoderLayerParams, Element, EncoderLayerParams, FeedForwardParams,
    LayerNormParams, ModelParams,
};
use super::{ModelError, BOS};
use crate::synthworld::ImageTensor;

/// Layer-norm variance epsilon.
const LN_EPS: f64 = 1e-5;

/// tanh-approximation constants for GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

// ---------------------------------------------------------------------------
// Elementwise pieces
// ---------------------------------------------------------------------------

fn gelu<E: Element>(x: E) -> E {
    let c = E::cast(GELU_C);
    let a = E::cast(GELU_A);
    let half = E::cast(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (E::one() + u.tanh())
}

fn gelu_grad<E: Element>(x: E) -> E {
    let c = E::cast(GELU_C);
    let a = E::cast(GELU_A);
    let half = E::cast(0.5);
    let three = E::cast(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = E::one() - t * t;
    half * (E::one() + t) + half * x * sech2 * c * (E::one() + three * a * x * x)
}

/// Column sums as a (1, n) row, the shape bias gradients live in.
fn col_sums<E: Element>(m: &Array2<E>) -> Array2<E> {
    m.sum_axis(Axis(0)).insert_axis(Axis(0))
}

// ---------------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------------

pub(crate) struct LnCache<E> {
    x_hat: Array2<E>,
    inv_std: Array1<E>,
}

fn layer_norm_forward<E: Element>(
    x: &Array2<E>,
    p: &LayerNormParams<E>,
) -> (Array2<E>, LnCache<E>) {
    let d = x.ncols();
    let inv_d = E::cast(1.0 / d as f64);
    let eps = E::cast(LN_EPS);
    let mut x_hat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in x_hat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.iter().fold(E::zero(), |a, &v| a + v) * inv_d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(E::zero(), |a, &v| a + v * v) * inv_d;
        *inv = (var + eps).sqrt().recip();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    let y = &x_hat * &p.gamma + &p.beta;
    (y, LnCache { x_hat, inv_std })
}

fn layer_norm_backward<E: Element>(
    dy: &Array2<E>,
    p: &LayerNormParams<E>,
    cache: &LnCache<E>,
    grads: &mut LayerNormParams<E>,
) -> Array2<E> {
    grads.beta += &col_sums(dy);
    grads.gamma += &col_sums(&(dy * &cache.x_hat));

    let d = dy.ncols();
    let inv_d = E::cast(1.0 / d as f64);
    let dx_hat = dy * &p.gamma;
    let mut dx = dx_hat.clone();
    for ((mut drow, x_hat_row), &inv_std) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.x_hat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_d = drow.iter().fold(E::zero(), |a, &v| a + v) * inv_d;
        let mean_dx = drow
            .iter()
            .zip(x_hat_row.iter())
            .fold(E::zero(), |a, (&g, &h)| a + g * h)
            * inv_d;
        for (g, &h) in drow.iter_mut().zip(x_hat_row.iter()) {
            *g = inv_std * (*g - mean_d - h * mean_dx);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

pub(crate) struct AttnCache<E> {
    xq: Array2<E>,
    xk: Array2<E>,
    q: Array2<E>,
    k: Array2<E>,
    v: Array2<E>,
    /// Softmaxed attention per head, (s, t); masked entries are exact zeros.
    attn: Vec<Array2<E>>,
    /// Concatenated head outputs before the output projection, (s, d).
    concat: Array2<E>,
}

fn attention_forward<E: Element>(
    xq: &Array2<E>,
    xk: &Array2<E>,
    p: &AttentionParams<E>,
    n_heads: usize,
    causal: bool,
) -> (Array2<E>, AttnCache<E>) {
    let (s, d) = xq.dim();
    let t = xk.nrows();
    debug_assert!(!causal || s == t, "causal masking assumes self-attention");
    let dh = d / n_heads;
    let scale = E::cast(1.0 / (dh as f64).sqrt());

    let q = xq.dot(&p.wq) + &p.bq;
    let k = xk.dot(&p.wk) + &p.bk;
    let v = xk.dot(&p.wv) + &p.bv;

    let mut concat = Array2::zeros((s, d));
    let mut attn = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t());
        scores.mapv_inplace(|x| x * scale);
        // Row-wise softmax over the visible span.
        for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
            let visible = if causal { i + 1 } else { t };
            let max = row
                .iter()
                .take(visible)
                .fold(E::neg_infinity(), |a, &b| if b > a { b } else { a });
            let mut mass = E::zero();
            for (j, x) in row.iter_mut().enumerate() {
                if j < visible {
                    *x = (*x - max).exp();
                    mass += *x;
                } else {
                    *x = E::zero();
                }
            }
            let inv = mass.recip();
            row.mapv_inplace(|x| x * inv);
        }
        concat.slice_mut(cols).assign(&scores.dot(&vh));
        attn.push(scores);
    }

    let out = concat.dot(&p.wo) + &p.bo;
    let cache = AttnCache { xq: xq.clone(), xk: xk.clone(), q, k, v, attn, concat };
    (out, cache)
}

/// Returns gradients w.r.t. the query-side input and the key/value-side
/// input; for self-attention the caller adds them together.
fn attention_backward<E: Element>(
    dout: &Array2<E>,
    p: &AttentionParams<E>,
    cache: &AttnCache<E>,
    n_heads: usize,
    grads: &mut AttentionParams<E>,
) -> (Array2<E>, Array2<E>) {
    let (s, d) = cache.xq.dim();
    let t = cache.xk.nrows();
    let dh = d / n_heads;
    let scale = E::cast(1.0 / (dh as f64).sqrt());

    grads.wo += &cache.concat.t().dot(dout);
    grads.bo += &col_sums(dout);
    let dconcat = dout.dot(&p.wo.t());

    let mut dq = Array2::zeros((s, d));
    let mut dk = Array2::zeros((t, d));
    let mut dv = Array2::zeros((t, d));
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let a = &cache.attn[h];
        let doh = dconcat.slice(cols);
        let vh = cache.v.slice(cols);

        dv.slice_mut(cols).assign(&a.t().dot(&doh));

        let da = doh.dot(&vh.t());
        // Softmax backward per row: ds = a ⊙ (da − Σ da⊙a). Masked entries
        // have a = 0 and therefore ds = 0 without special handling.
        let mut ds = da;
        for (mut ds_row, a_row) in ds.rows_mut().into_iter().zip(a.rows()) {
            let dot = ds_row
                .iter()
                .zip(a_row.iter())
                .fold(E::zero(), |acc, (&g, &w)| acc + g * w);
            for (g, &w) in ds_row.iter_mut().zip(a_row.iter()) {
                *g = w * (*g - dot);
            }
        }
        ds.mapv_inplace(|x| x * scale);

        let qh = cache.q.slice(cols);
        let kh = cache.k.slice(cols);
        dq.slice_mut(cols).assign(&ds.dot(&kh));
        dk.slice_mut(cols).assign(&ds.t().dot(&qh));
    }

    grads.wq += &cache.xq.t().dot(&dq);
    grads.bq += &col_sums(&dq);
    grads.wk += &cache.xk.t().dot(&dk);
    grads.bk += &col_sums(&dk);
    grads.wv += &cache.xk.t().dot(&dv);
    grads.bv += &col_sums(&dv);

    let dxq = dq.dot(&p.wq.t());
    let dxk = dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());
    (dxq, dxk)
}

// ---------------------------------------------------------------------------
// Feed-forward
// ---------------------------------------------------------------------------

pub(crate) struct FfCache<E> {
    x: Array2<E>,
    z: Array2<E>,
}

fn feed_forward_forward<E: Element>(
    x: &Array2<E>,
    p: &FeedForwardParams<E>,
) -> (Array2<E>, FfCache<E>) {
    let z = x.dot(&p.w1) + &p.b1;
    let h = z.mapv(gelu);
    let y = h.dot(&p.w2) + &p.b2;
    (y, FfCache { x: x.clone(), z })
}

fn feed_forward_backward<E: Element>(
    dy: &Array2<E>,
    p: &FeedForwardParams<E>,
    cache: &FfCache<E>,
    grads: &mut FeedForwardParams<E>,
) -> Array2<E> {
    let h = cache.z.mapv(gelu);
    grads.w2 += &h.t().dot(dy);
    grads.b2 += &col_sums(dy);
    let dh = dy.dot(&p.w2.t());
    let dz = &dh * &cache.z.mapv(gelu_grad);
    grads.w1 += &cache.x.t().dot(&dz);
    grads.b1 += &col_sums(&dz);
    dz.dot(&p.w1.t())
}

// ---------------------------------------------------------------------------
// Encoder / decoder layers (pre-LN residual blocks)
// ---------------------------------------------------------------------------

pub(crate) struct EncLayerCache<E> {
    ln1: LnCache<E>,
    attn: AttnCache<E>,
    ln2: LnCache<E>,
    ff: FfCache<E>,
}

fn encoder_layer_forward<E: Element>(
    x: &Array2<E>,
    p: &EncoderLayerParams<E>,
    n_heads: usize,
) -> (Array2<E>, EncLayerCache<E>) {
    let (normed, ln1) = layer_norm_forward(x, &p.norm1);
    let (attn_out, attn) = attention_forward(&normed, &normed, &p.attn, n_heads, false);
    let a = x + &attn_out;
    let (normed2, ln2) = layer_norm_forward(&a, &p.norm2);
    let (ff_out, ff) = feed_forward_forward(&normed2, &p.ff);
    let y = &a + &ff_out;
    (y, EncLayerCache { ln1, attn, ln2, ff })
}

fn encoder_layer_backward<E: Element>(
    dy: &Array2<E>,
    p: &EncoderLayerParams<E>,
    cache: &EncLayerCache<E>,
    n_heads: usize,
    grads: &mut EncoderLayerParams<E>,
) -> Array2<E> {
    let d_ff_in = feed_forward_backward(dy, &p.ff, &cache.ff, &mut grads.ff);
    let mut da = dy + &layer_norm_backward(&d_ff_in, &p.norm2, &cache.ln2, &mut grads.norm2);
    let (dxq, dxk) = attention_backward(&da, &p.attn, &cache.attn, n_heads, &mut grads.attn);
    let d_ln1_in = dxq + dxk;
    da += &layer_norm_backward(&d_ln1_in, &p.norm1, &cache.ln1, &mut grads.norm1);
    da
}

pub(crate) struct DecLayerCache<E> {
    ln1: LnCache<E>,
    self_attn: AttnCache<E>,
    ln2: LnCache<E>,
    cross_attn: AttnCache<E>,
    ln3: LnCache<E>,
    ff: FfCache<E>,
}

fn decoder_layer_forward<E: Element>(
    x: &Array2<E>,
    enc_out: &Array2<E>,
    p: &DecoderLayerParams<E>,
    n_heads: usize,
) -> (Array2<E>, DecLayerCache<E>) {
    let (normed1, ln1) = layer_norm_forward(x, &p.norm1);
    let (self_out, self_attn) = attention_forward(&normed1, &normed1, &p.self_attn, n_heads, true);
    let a = x + &self_out;
    let (normed2, ln2) = layer_norm_forward(&a, &p.norm2);
    let (cross_out, cross_attn) =
        attention_forward(&normed2, enc_out, &p.cross_attn, n_heads, false);
    let b = &a + &cross_out;
    let (normed3, ln3) = layer_norm_forward(&b, &p.norm3);
    let (ff_out, ff) = feed_forward_forward(&normed3, &p.ff);
    let y = &b + &ff_out;
    (y, DecLayerCache { ln1, self_attn, ln2, cross_attn, ln3, ff })
}

/// Returns (d_input, d_encoder_output).
fn decoder_layer_backward<E: Element>(
    dy: &Array2<E>,
    p: &DecoderLayerParams<E>,
    cache: &DecLayerCache<E>,
    n_heads: usize,
    grads: &mut DecoderLayerParams<E>,
) -> (Array2<E>, Array2<E>) {
    let d_ff_in = feed_forward_backward(dy, &p.ff, &cache.ff, &mut grads.ff);
    let db = dy + &layer_norm_backward(&d_ff_in, &p.norm3, &cache.ln3, &mut grads.norm3);

    let (d_cross_q, d_enc) =
        attention_backward(&db, &p.cross_attn, &cache.cross_attn, n_heads, &mut grads.cross_attn);
    let mut da = &db + &layer_norm_backward(&d_cross_q, &p.norm2, &cache.ln2, &mut grads.norm2);

    let (dxq, dxk) =
        attention_backward(&da, &p.self_attn, &cache.self_attn, n_heads, &mut grads.self_attn);
    let d_ln1_in = dxq + dxk;
    da += &layer_norm_backward(&d_ln1_in, &p.norm1, &cache.ln1, &mut grads.norm1);
    (da, d_enc)
}

// ---------------------------------------------------------------------------
// Whole-model forward / backward
// ---------------------------------------------------------------------------

/// Whether an encoder output was built from the image alone (question
/// generation) or from image plus question (answering).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    ImageOnly,
    ImageQuestion,
}

/// Encoder hidden states: one d_model row per grid cell, followed by one
/// per question token when present.
#[derive(Debug, Clone)]
pub struct EncoderOutput<E> {
    pub hidden: Array2<E>,
    pub mode: EncodeMode,
}

pub(crate) struct EncCache<E> {
    image: Array2<E>,
    question: Vec<usize>,
    layers: Vec<EncLayerCache<E>>,
}

pub(crate) struct DecCache<E> {
    targets: Vec<usize>,
    layers: Vec<DecLayerCache<E>>,
    final_ln: LnCache<E>,
    final_hidden: Array2<E>,
}

/// Caches for one full encode-decode pass, consumed by [`backward_full`].
pub(crate) struct ForwardCache<E> {
    enc: EncCache<E>,
    enc_out: Array2<E>,
    dec: DecCache<E>,
}

fn check_tokens<E: Element>(
    params: &ModelParams<E>,
    tokens: &[usize],
    what: &'static str,
    max: usize,
) -> Result<(), ModelError> {
    if tokens.len() > max {
        return Err(ModelError::LengthError { what, got: tokens.len(), max });
    }
    for &t in tokens {
        if t >= params.hyper.vocab_size {
            return Err(ModelError::TokenOutOfRange(t));
        }
    }
    Ok(())
}

fn encode_with_cache<E: Element>(
    params: &ModelParams<E>,
    image: &ImageTensor,
    question: Option<&[usize]>,
) -> Result<(Array2<E>, EncCache<E>), ModelError> {
    let hyper = &params.hyper;
    if image.nrows() != hyper.n_cells || image.ncols() != hyper.feature_dim {
        return Err(ModelError::ShapeMismatch { got: image.ncols(), want: hyper.feature_dim });
    }
    let question: Vec<usize> = question.map(|q| q.to_vec()).unwrap_or_default();
    check_tokens(params, &question, "question", hyper.max_question_len)?;

    let image_e = image.mapv(E::cast);
    let img_rows = image_e.dot(&params.feature_proj_w) + &params.feature_proj_b + &params.pos_grid;

    let mut x = Array2::zeros((hyper.n_cells + question.len(), hyper.d_model));
    x.slice_mut(s![..hyper.n_cells, ..]).assign(&img_rows);
    for (i, &tok) in question.iter().enumerate() {
        let row = &params.token_embedding.row(tok) + &params.pos_question.row(i);
        x.slice_mut(s![hyper.n_cells + i, ..]).assign(&row);
    }

    let mut layers = Vec::with_capacity(params.encoder.len());
    for layer in &params.encoder {
        let (next, cache) = encoder_layer_forward(&x, layer, hyper.n_heads);
        x = next;
        layers.push(cache);
    }
    Ok((x, EncCache { image: image_e, question, layers }))
}

fn decode_with_cache<E: Element>(
    params: &ModelParams<E>,
    enc_out: &Array2<E>,
    targets: &[usize],
) -> Result<(Array2<E>, DecCache<E>), ModelError> {
    let hyper = &params.hyper;
    if targets.is_empty() {
        return Err(ModelError::LengthError { what: "target", got: 0, max: hyper.max_target_len });
    }
    check_tokens(params, targets, "target", hyper.max_target_len)?;
    debug_assert_eq!(targets[0], BOS, "decoder input must begin with BOS");

    let mut x = Array2::zeros((targets.len(), hyper.d_model));
    for (i, &tok) in targets.iter().enumerate() {
        let row = &params.token_embedding.row(tok) + &params.pos_decoder.row(i);
        x.slice_mut(s![i, ..]).assign(&row);
    }

    let mut layers = Vec::with_capacity(params.decoder.len());
    for layer in &params.decoder {
        let (next, cache) = decoder_layer_forward(&x, enc_out, layer, hyper.n_heads);
        x = next;
        layers.push(cache);
    }
    let (final_hidden, final_ln) = layer_norm_forward(&x, &params.final_norm);
    let logits = final_hidden.dot(&params.output_w) + &params.output_b;
    Ok((logits, DecCache { targets: targets.to_vec(), layers, final_ln, final_hidden }))
}

/// Runs the encoder over an image, optionally with a question appended.
pub fn encode<E: Element>(
    params: &ModelParams<E>,
    image: &ImageTensor,
    question: Option<&[usize]>,
) -> Result<EncoderOutput<E>, ModelError> {
    let mode = if question.is_some() { EncodeMode::ImageQuestion } else { EncodeMode::ImageOnly };
    let (hidden, _) = encode_with_cache(params, image, question)?;
    Ok(EncoderOutput { hidden, mode })
}

/// Next-token logits for a decoder input that begins with BOS: row `t`
/// holds the logits after consuming `targets[..=t]`, so it predicts the
/// token that should follow position `t` and is unaffected by any later
/// target token.
pub fn decode_logits<E: Element>(
    params: &ModelParams<E>,
    enc: &EncoderOutput<E>,
    targets: &[usize],
) -> Result<Array2<E>, ModelError> {
    let (logits, _) = decode_with_cache(params, &enc.hidden, targets)?;
    Ok(logits)
}

/// Full training-path forward: encode, decode, and keep every cache.
pub(crate) fn forward_full<E: Element>(
    params: &ModelParams<E>,
    image: &ImageTensor,
    question: Option<&[usize]>,
    targets: &[usize],
) -> Result<(Array2<E>, ForwardCache<E>), ModelError> {
    let (enc_out, enc) = encode_with_cache(params, image, question)?;
    let (logits, dec) = decode_with_cache(params, &enc_out, targets)?;
    Ok((logits, ForwardCache { enc, enc_out, dec }))
}

/// Accumulates gradients for one example given d(loss)/d(logits).
pub(crate) fn backward_full<E: Element>(
    params: &ModelParams<E>,
    cache: &ForwardCache<E>,
    dlogits: &Array2<E>,
    grads: &mut ModelParams<E>,
) {
    let hyper = &params.hyper;
    let dec = &cache.dec;

    grads.output_w += &dec.final_hidden.t().dot(dlogits);
    grads.output_b += &col_sums(dlogits);
    let dh = dlogits.dot(&params.output_w.t());
    let mut dx = layer_norm_backward(&dh, &params.final_norm, &dec.final_ln, &mut grads.final_norm);

    let mut d_enc_out: Array2<E> = Array2::zeros(cache.enc_out.dim());
    for ((layer, layer_cache), layer_grads) in params
        .decoder
        .iter()
        .zip(&dec.layers)
        .zip(&mut grads.decoder)
        .rev()
    {
        let (d_in, d_enc) =
            decoder_layer_backward(&dx, layer, layer_cache, hyper.n_heads, layer_grads);
        dx = d_in;
        d_enc_out += &d_enc;
    }
    // Decoder input embeddings: token table rows and decoder positions.
    for (i, &tok) in dec.targets.iter().enumerate() {
        let drow = dx.row(i);
        let mut tok_row = grads.token_embedding.row_mut(tok);
        tok_row += &drow;
        let mut pos_row = grads.pos_decoder.row_mut(i);
        pos_row += &drow;
    }

    let enc = &cache.enc;
    let mut de = d_enc_out;
    for ((layer, layer_cache), layer_grads) in params
        .encoder
        .iter()
        .zip(&enc.layers)
        .zip(&mut grads.encoder)
        .rev()
    {
        de = encoder_layer_backward(&de, layer, layer_cache, hyper.n_heads, layer_grads);
    }
    // Encoder input embeddings: image projection and position tables.
    let d_img = de.slice(s![..hyper.n_cells, ..]);
    grads.feature_proj_w += &enc.image.t().dot(&d_img);
    grads.feature_proj_b += &col_sums(&d_img.to_owned());
    grads.pos_grid += &d_img;
    for (i, &tok) in enc.question.iter().enumerate() {
        let drow = de.row(hyper.n_cells + i);
        let mut tok_row = grads.token_embedding.row_mut(tok);
        tok_row += &drow;
        let mut pos_row = grads.pos_question.row_mut(i);
        pos_row += &drow;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::HyperParams;
    use crate::model::Vocabulary;
    use crate::seeding::stream_rng;
    use crate::synthworld::{encode_scene, generate_scene, WorldSpec};
    use rand::Rng;
    use std::sync::Arc;

    fn tiny_params(seed: u64) -> ModelParams<f64> {
        let world = WorldSpec::default_world();
        let vocab = Vocabulary::for_world(&world);
        ModelParams::init(HyperParams::tiny_for(&world, &vocab), seed).unwrap()
    }

    fn test_image(seed: u64) -> ImageTensor {
        let spec = Arc::new(WorldSpec::default_world());
        encode_scene(&generate_scene(&spec, seed))
    }

    fn random_matrix(rng: &mut rand_chacha::ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen::<f64>() - 0.5)
    }

    /// Central finite differences of a scalar function of one matrix.
    fn fd_matrix_grad(
        f: &mut dyn FnMut(&Array2<f64>) -> f64,
        x: &Array2<f64>,
        h: f64,
    ) -> Array2<f64> {
        let mut grad = Array2::zeros(x.dim());
        let mut probe = x.clone();
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let orig = probe[[r, c]];
            probe[[r, c]] = orig + h;
            let plus = f(&probe);
            probe[[r, c]] = orig - h;
            let minus = f(&probe);
            probe[[r, c]] = orig;
            grad[[r, c]] = (plus - minus) / (2.0 * h);
        }
        grad
    }

    fn assert_close(analytic: &Array2<f64>, numeric: &Array2<f64>, label: &str) {
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let denom = a.abs().max(n.abs()).max(1e-4);
            let rel = (a - n).abs() / denom;
            assert!(rel < 1e-5, "{label}: analytic {a} vs numeric {n} (rel {rel})");
        }
    }

    /// Weighted sum of the output entries — a scalar head whose logit
    /// gradient is just the weight matrix.
    fn weighted(out: &Array2<f64>, w: &Array2<f64>) -> f64 {
        out.iter().zip(w.iter()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = stream_rng("ln-fd", &[0]);
        let x = random_matrix(&mut rng, 5, 8);
        let p = LayerNormParams {
            gamma: random_matrix(&mut rng, 1, 8),
            beta: random_matrix(&mut rng, 1, 8),
        };
        let w = random_matrix(&mut rng, 5, 8);

        let (y, cache) = layer_norm_forward(&x, &p);
        let mut grads = LayerNormParams { gamma: Array2::zeros((1, 8)), beta: Array2::zeros((1, 8)) };
        let dx = layer_norm_backward(&w, &p, &cache, &mut grads);
        let _ = y;

        let mut f_x = |xx: &Array2<f64>| weighted(&layer_norm_forward(xx, &p).0, &w);
        assert_close(&dx, &fd_matrix_grad(&mut f_x, &x, 1e-6), "ln dx");
        let mut f_g = |g: &Array2<f64>| {
            let pp = LayerNormParams { gamma: g.clone(), beta: p.beta.clone() };
            weighted(&layer_norm_forward(&x, &pp).0, &w)
        };
        assert_close(&grads.gamma, &fd_matrix_grad(&mut f_g, &p.gamma, 1e-6), "ln dgamma");
        let mut f_b = |b: &Array2<f64>| {
            let pp = LayerNormParams { gamma: p.gamma.clone(), beta: b.clone() };
            weighted(&layer_norm_forward(&x, &pp).0, &w)
        };
        assert_close(&grads.beta, &fd_matrix_grad(&mut f_b, &p.beta, 1e-6), "ln dbeta");
    }

    #[test]
    fn feed_forward_backward_matches_finite_differences() {
        let mut rng = stream_rng("ff-fd", &[0]);
        let x = random_matrix(&mut rng, 4, 6);
        let p = FeedForwardParams {
            w1: random_matrix(&mut rng, 6, 10),
            b1: random_matrix(&mut rng, 1, 10),
            w2: random_matrix(&mut rng, 10, 6),
            b2: random_matrix(&mut rng, 1, 6),
        };
        let w = random_matrix(&mut rng, 4, 6);

        let (_, cache) = feed_forward_forward(&x, &p);
        let mut grads = FeedForwardParams {
            w1: Array2::zeros((6, 10)),
            b1: Array2::zeros((1, 10)),
            w2: Array2::zeros((10, 6)),
            b2: Array2::zeros((1, 6)),
        };
        let dx = feed_forward_backward(&w, &p, &cache, &mut grads);

        let mut f_x = |xx: &Array2<f64>| weighted(&feed_forward_forward(xx, &p).0, &w);
        assert_close(&dx, &fd_matrix_grad(&mut f_x, &x, 1e-6), "ff dx");
        let mut f_w1 = |m: &Array2<f64>| {
            let mut pp = p.clone();
            pp.w1 = m.clone();
            weighted(&feed_forward_forward(&x, &pp).0, &w)
        };
        assert_close(&grads.w1, &fd_matrix_grad(&mut f_w1, &p.w1, 1e-6), "ff dw1");
        let mut f_b1 = |m: &Array2<f64>| {
            let mut pp = p.clone();
            pp.b1 = m.clone();
            weighted(&feed_forward_forward(&x, &pp).0, &w)
        };
        assert_close(&grads.b1, &fd_matrix_grad(&mut f_b1, &p.b1, 1e-6), "ff db1");
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        let mut rng = stream_rng("attn-fd", &[0]);
        for causal in [false, true] {
            let (s, t, d) = if causal { (5, 5, 8) } else { (4, 6, 8) };
            let xq = random_matrix(&mut rng, s, d);
            let xk = if causal { xq.clone() } else { random_matrix(&mut rng, t, d) };
            let p = AttentionParams {
                wq: random_matrix(&mut rng, d, d),
                bq: random_matrix(&mut rng, 1, d),
                wk: random_matrix(&mut rng, d, d),
                bk: random_matrix(&mut rng, 1, d),
                wv: random_matrix(&mut rng, d, d),
                bv: random_matrix(&mut rng, 1, d),
                wo: random_matrix(&mut rng, d, d),
                bo: random_matrix(&mut rng, 1, d),
            };
            let w = random_matrix(&mut rng, s, d);

            let (_, cache) = attention_forward(&xq, &xk, &p, 2, causal);
            let mut grads = AttentionParams {
                wq: Array2::zeros((d, d)),
                bq: Array2::zeros((1, d)),
                wk: Array2::zeros((d, d)),
                bk: Array2::zeros((1, d)),
                wv: Array2::zeros((d, d)),
                bv: Array2::zeros((1, d)),
                wo: Array2::zeros((d, d)),
                bo: Array2::zeros((1, d)),
            };
            let (dxq, dxk) = attention_backward(&w, &p, &cache, 2, &mut grads);

            if causal {
                // Self-attention: gradient w.r.t. the shared input.
                let sum = &dxq + &dxk;
                let mut f = |xx: &Array2<f64>| {
                    weighted(&attention_forward(xx, xx, &p, 2, true).0, &w)
                };
                assert_close(&sum, &fd_matrix_grad(&mut f, &xq, 1e-6), "self-attn dx");
            } else {
                let mut f_q = |xx: &Array2<f64>| {
                    weighted(&attention_forward(xx, &xk, &p, 2, false).0, &w)
                };
                assert_close(&dxq, &fd_matrix_grad(&mut f_q, &xq, 1e-6), "cross dxq");
                let mut f_k = |xx: &Array2<f64>| {
                    weighted(&attention_forward(&xq, xx, &p, 2, false).0, &w)
                };
                assert_close(&dxk, &fd_matrix_grad(&mut f_k, &xk, 1e-6), "cross dxk");
            }

            let mut f_wq = |m: &Array2<f64>| {
                let mut pp = p.clone();
                pp.wq = m.clone();
                weighted(&attention_forward(&xq, &xk, &pp, 2, causal).0, &w)
            };
            assert_close(&grads.wq, &fd_matrix_grad(&mut f_wq, &p.wq, 1e-6), "attn dwq");
            let mut f_wo = |m: &Array2<f64>| {
                let mut pp = p.clone();
                pp.wo = m.clone();
                weighted(&attention_forward(&xq, &xk, &pp, 2, causal).0, &w)
            };
            assert_close(&grads.wo, &fd_matrix_grad(&mut f_wo, &p.wo, 1e-6), "attn dwo");
        }
    }

    #[test]
    fn encode_has_the_contracted_position_counts() {
        let params = tiny_params(0);
        let image = test_image(1);
        let image_only = encode(&params, &image, None).unwrap();
        assert_eq!(image_only.hidden.nrows(), 16);
        assert_eq!(image_only.mode, EncodeMode::ImageOnly);

        let question = [10, 11, 12, 13, 14];
        let with_q = encode(&params, &image, Some(&question)).unwrap();
        assert_eq!(with_q.hidden.nrows(), 21);
        assert_eq!(with_q.mode, EncodeMode::ImageQuestion);
    }

    #[test]
    fn encode_is_deterministic_and_checks_shapes() {
        let params = tiny_params(0);
        let image = test_image(2);
        let a = encode(&params, &image, None).unwrap();
        let b = encode(&params, &image, None).unwrap();
        assert_eq!(a.hidden, b.hidden);

        let bad = Array2::<f64>::zeros((16, 3));
        assert!(matches!(
            encode(&params, &bad, None),
            Err(ModelError::ShapeMismatch { got: 3, .. })
        ));
    }

    #[test]
    fn decode_logits_has_one_row_per_target() {
        let params = tiny_params(0);
        let enc = encode(&params, &test_image(3), None).unwrap();
        let targets = [BOS, 10, 11, 12];
        let logits = decode_logits(&params, &enc, &targets).unwrap();
        assert_eq!(logits.nrows(), 4);
        assert_eq!(logits.ncols(), params.hyper.vocab_size);
    }

    #[test]
    fn decode_logits_is_causal_under_target_perturbation() {
        let params = tiny_params(4);
        let enc = encode(&params, &test_image(5), None).unwrap();
        let targets = [BOS, 10, 11, 12, 13, 14];
        let base = decode_logits(&params, &enc, &targets).unwrap();
        for t in 1..targets.len() {
            let mut perturbed = targets;
            perturbed[t] = 20;
            let alt = decode_logits(&params, &enc, &perturbed).unwrap();
            for row in 0..t {
                for v in 0..base.ncols() {
                    assert_eq!(
                        base[[row, v]],
                        alt[[row, v]],
                        "row {row} changed when token {t} was perturbed"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_params_give_flat_logit_rows() {
        let mut params = tiny_params(0);
        for tensor in params.tensors_mut() {
            tensor.fill(0.0);
        }
        let enc = encode(&params, &test_image(6), None).unwrap();
        let logits = decode_logits(&params, &enc, &[BOS, 10, 11]).unwrap();
        for row in logits.rows() {
            for &v in row.iter() {
                assert_eq!(v, row[0]);
            }
        }
    }

    #[test]
    fn sequence_length_limits_are_enforced() {
        let params = tiny_params(0);
        let image = test_image(7);
        let long_q = vec![10usize; params.hyper.max_question_len + 1];
        assert!(matches!(
            encode(&params, &image, Some(&long_q)),
            Err(ModelError::LengthError { what: "question", .. })
        ));
        let enc = encode(&params, &image, None).unwrap();
        let long_t = vec![BOS; params.hyper.max_target_len + 1];
        assert!(matches!(
            decode_logits(&params, &enc, &long_t),
            Err(ModelError::LengthError { what: "target", .. })
        ));
        assert!(matches!(
            decode_logits(&params, &enc, &[BOS, params.hyper.vocab_size]),
            Err(ModelError::TokenOutOfRange(_))
        ));
    }

    #[test]
    fn gelu_gradient_matches_finite_differences() {
        for x in [-3.0, -1.0, -0.1, 0.0, 0.1, 1.0, 3.0] {
            let h = 1e-6;
            let numeric = (gelu::<f64>(x + h) - gelu::<f64>(x - h)) / (2.0 * h);
            let analytic = gelu_grad::<f64>(x);
            assert!((numeric - analytic).abs() < 1e-8, "x={x}: {analytic} vs {numeric}");
        }
    }
}
