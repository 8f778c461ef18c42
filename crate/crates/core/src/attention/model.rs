//! A small pre-norm decoder with masked multi-head attention and a
//! hand-derived backward pass.
//!
//! Each layer computes
//!
//! ```text
//! x ← x + Σ_h softmax_M(norm(x)W_Q (norm(x)W_K)ᵀ / √d_head) norm(x)W_V W_O
//! x ← x + silu(norm(x)W_in) W_out
//! ```
//!
//! with RMS normalization and no biases, so an all-zero parameter set maps
//! every input to all-zero logits.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::loss::{nll_loss, nll_loss_with_grad, Reduction};
use super::masked_attention;
use crate::error::{Result, SlimError};
use crate::mask::AttentionMask;
use crate::matrix::Matrix;
use crate::scene::TokenLayout;

const RMS_EPS: f64 = 1e-6;
const TIED_UNEMBED_SCALE: f64 = 0.25;

pub const MAX_LAYERS: usize = 2;
pub const MAX_HEADS: usize = 4;
pub const MAX_D_MODEL: usize = 64;
pub const MAX_SEQ_LEN: usize = 256;
pub const MAX_VOCAB: usize = 512;

/// How position ids are assigned to object tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PositionMode {
    /// Every object token shares one position id, so the object segment is
    /// order-free.
    SharedObject,
    /// Standard absolute positions.
    PerToken,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Width of the optional continuous per-token input features.
    pub feature_dim: usize,
    pub position_mode: PositionMode,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (
                self.n_layers >= 1 && self.n_layers <= MAX_LAYERS,
                "n_layers must be in 1..=2",
            ),
            (
                self.n_heads >= 1 && self.n_heads <= MAX_HEADS,
                "n_heads must be in 1..=4",
            ),
            (
                self.d_model >= 1 && self.d_model <= MAX_D_MODEL,
                "d_model must be in 1..=64",
            ),
            (self.d_head >= 1, "d_head must be positive"),
            (self.d_ff >= 1, "d_ff must be positive"),
            (
                self.vocab_size >= 1 && self.vocab_size <= MAX_VOCAB,
                "vocab_size must be in 1..=512",
            ),
            (
                self.max_positions >= 1 && self.max_positions <= MAX_SEQ_LEN,
                "max_positions must be in 1..=256",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(SlimError::config(*msg)),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w_q: Matrix<f64>,
    pub w_k: Matrix<f64>,
    pub w_v: Matrix<f64>,
    pub w_o: Matrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Matrix<f64>,
    pub heads: Vec<HeadParams>,
    pub ffn_norm: Matrix<f64>,
    pub ffn_in: Matrix<f64>,
    pub ffn_out: Matrix<f64>,
}

/// All decoder weights. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    pub token_embedding: Matrix<f64>,
    pub position_embedding: Matrix<f64>,
    pub feature_projection: Matrix<f64>,
    pub layers: Vec<LayerParams>,
    pub final_norm: Matrix<f64>,
    pub unembed: Matrix<f64>,
}

pub type Gradients = DecoderParams;

impl DecoderParams {
    /// Every weight zero, including normalization gains.
    pub fn zeros(config: &DecoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self::constant(config, 0.0))
    }

    /// Gaussian initialization scaled by fan-in; normalization gains start at 1.
    pub fn init(config: &DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut sample = |rows: usize, cols: usize, std: f64| -> Matrix<f64> {
            let normal = Normal::new(0.0, std).expect("positive std");
            Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
        };
        let c = config;
        let d = c.d_model as f64;
        let layers = (0..c.n_layers)
            .map(|_| LayerParams {
                attn_norm: Matrix::filled(1, c.d_model, 1.0),
                heads: (0..c.n_heads)
                    .map(|_| HeadParams {
                        w_q: sample(c.d_model, c.d_head, 1.0 / d.sqrt()),
                        w_k: sample(c.d_model, c.d_head, 1.0 / d.sqrt()),
                        w_v: sample(c.d_model, c.d_head, 1.0 / d.sqrt()),
                        w_o: sample(
                            c.d_head,
                            c.d_model,
                            0.5 / ((c.d_head * c.n_heads) as f64).sqrt(),
                        ),
                    })
                    .collect(),
                ffn_norm: Matrix::filled(1, c.d_model, 1.0),
                ffn_in: sample(c.d_model, c.d_ff, 1.0 / d.sqrt()),
                ffn_out: sample(c.d_ff, c.d_model, 0.5 / (c.d_ff as f64).sqrt()),
            })
            .collect();
        let token_embedding = sample(c.vocab_size, c.d_model, 0.5);
        // Output starts as a scaled transpose of the input embedding, so
        // copying a token through the residual stream already scores it.
        let unembed = Matrix::from_fn(c.d_model, c.vocab_size, |r, k| {
            TIED_UNEMBED_SCALE * token_embedding[(k, r)]
        });
        Ok(DecoderParams {
            config: c.clone(),
            token_embedding,
            position_embedding: sample(c.max_positions, c.d_model, 0.1),
            feature_projection: sample(
                c.feature_dim,
                c.d_model,
                0.5 / (c.feature_dim.max(1) as f64).sqrt(),
            ),
            layers,
            final_norm: Matrix::filled(1, c.d_model, 1.0),
            unembed,
        })
    }

    fn constant(config: &DecoderConfig, value: f64) -> Self {
        let c = config;
        let m = |rows: usize, cols: usize| Matrix::filled(rows, cols, value);
        let layers = (0..c.n_layers)
            .map(|_| LayerParams {
                attn_norm: m(1, c.d_model),
                heads: (0..c.n_heads)
                    .map(|_| HeadParams {
                        w_q: m(c.d_model, c.d_head),
                        w_k: m(c.d_model, c.d_head),
                        w_v: m(c.d_model, c.d_head),
                        w_o: m(c.d_head, c.d_model),
                    })
                    .collect(),
                ffn_norm: m(1, c.d_model),
                ffn_in: m(c.d_model, c.d_ff),
                ffn_out: m(c.d_ff, c.d_model),
            })
            .collect();
        DecoderParams {
            config: c.clone(),
            token_embedding: m(c.vocab_size, c.d_model),
            position_embedding: m(c.max_positions, c.d_model),
            feature_projection: m(c.feature_dim, c.d_model),
            layers,
            final_norm: m(1, c.d_model),
            unembed: m(c.d_model, c.vocab_size),
        }
    }

    /// Named references to every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Matrix<f64>)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
            ("feature_projection".to_string(), &self.feature_projection),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.attn_norm"), &layer.attn_norm));
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("layer{l}.head{h}.w_q"), &head.w_q));
                out.push((format!("layer{l}.head{h}.w_k"), &head.w_k));
                out.push((format!("layer{l}.head{h}.w_v"), &head.w_v));
                out.push((format!("layer{l}.head{h}.w_o"), &head.w_o));
            }
            out.push((format!("layer{l}.ffn_norm"), &layer.ffn_norm));
            out.push((format!("layer{l}.ffn_in"), &layer.ffn_in));
            out.push((format!("layer{l}.ffn_out"), &layer.ffn_out));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    /// Mutable references in the same order as [`DecoderParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<f64>> {
        let mut out = vec![
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.feature_projection,
        ];
        for layer in &mut self.layers {
            out.push(&mut layer.attn_norm);
            for head in &mut layer.heads {
                out.push(&mut head.w_q);
                out.push(&mut head.w_k);
                out.push(&mut head.w_v);
                out.push(&mut head.w_o);
            }
            out.push(&mut layer.ffn_norm);
            out.push(&mut layer.ffn_in);
            out.push(&mut layer.ffn_out);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unembed);
        out
    }

    pub fn zeros_like(&self) -> Gradients {
        Self::constant(&self.config, 0.0)
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.as_slice().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn axpy(&mut self, scale: f64, other: &DecoderParams) {
        let others = other.tensors();
        for (mine, (_, theirs)) in self.tensors_mut().into_iter().zip(others) {
            mine.axpy(scale, theirs);
        }
    }
}

/// One input sequence with its mask and (optionally) response targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub tokens: Vec<usize>,
    /// `n × feature_dim` continuous inputs, added through the feature
    /// projection.
    pub features: Option<Matrix<f64>>,
    pub layout: TokenLayout,
    pub mask: AttentionMask,
    /// Target token for each response position; logits at response position
    /// `l` are scored against `targets[l]`.
    pub targets: Vec<usize>,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, config: &DecoderConfig) -> Result<()> {
        let n = self.layout.len();
        if self.tokens.len() != n || self.mask.len() != n {
            return Err(SlimError::config(format!(
                "layout has {n} tokens but the sequence has {} and the mask {}",
                self.tokens.len(),
                self.mask.len()
            )));
        }
        if n > config.max_positions {
            return Err(SlimError::config(format!(
                "sequence of {n} tokens exceeds max_positions {}",
                config.max_positions
            )));
        }
        if let Some(&t) = self
            .tokens
            .iter()
            .chain(&self.targets)
            .find(|&&t| t >= config.vocab_size)
        {
            return Err(SlimError::config(format!(
                "token id {t} outside vocabulary of {}",
                config.vocab_size
            )));
        }
        if let Some(f) = &self.features {
            if f.rows() != n || f.cols() != config.feature_dim {
                return Err(SlimError::config(format!(
                    "features are {}x{}, expected {n}x{}",
                    f.rows(),
                    f.cols(),
                    config.feature_dim
                )));
            }
        }
        if !self.targets.is_empty() && self.targets.len() != self.layout.n_response {
            return Err(SlimError::config(format!(
                "{} targets for a response segment of {}",
                self.targets.len(),
                self.layout.n_response
            )));
        }
        Ok(())
    }
}

/// Position id of every token under `mode`.
pub fn position_ids(layout: &TokenLayout, mode: PositionMode) -> Vec<usize> {
    let n = layout.len();
    match mode {
        PositionMode::PerToken => (0..n).collect(),
        PositionMode::SharedObject => {
            let obj = layout.spans().object_segment();
            let collapsed = obj.len().saturating_sub(1);
            (0..n)
                .map(|p| {
                    if p < obj.start {
                        p
                    } else if p < obj.end {
                        obj.start
                    } else {
                        p - collapsed
                    }
                })
                .collect()
        }
    }
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

struct Norm {
    out: Matrix<f64>,
    inv_rms: Vec<f64>,
}

fn rms_norm(x: &Matrix<f64>, gain: &Matrix<f64>) -> Norm {
    let d = x.cols();
    let g = gain.row(0);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv_rms = Vec::with_capacity(x.rows());
    for p in 0..x.rows() {
        let row = x.row(p);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        inv_rms.push(inv);
        for ((o, &v), &gi) in out.row_mut(p).iter_mut().zip(row).zip(g) {
            *o = gi * v * inv;
        }
    }
    Norm { out, inv_rms }
}

/// Backward through `rms_norm`; accumulates the gain gradient and returns
/// the input gradient.
fn rms_norm_backward(
    x: &Matrix<f64>,
    gain: &Matrix<f64>,
    inv_rms: &[f64],
    d_out: &Matrix<f64>,
    d_gain: &mut Matrix<f64>,
) -> Matrix<f64> {
    let d = x.cols();
    let g = gain.row(0);
    let mut dx = Matrix::zeros(x.rows(), d);
    for p in 0..x.rows() {
        let inv = inv_rms[p];
        let xr = x.row(p);
        let dy = d_out.row(p);
        let mut proj = 0.0;
        for i in 0..d {
            d_gain[(0, i)] += dy[i] * xr[i] * inv;
            proj += g[i] * dy[i] * xr[i];
        }
        let coef = proj * inv * inv * inv / d as f64;
        for (i, o) in dx.row_mut(p).iter_mut().enumerate() {
            *o = g[i] * dy[i] * inv - xr[i] * coef;
        }
    }
    dx
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct HeadCache {
    q: Matrix<f64>,
    k: Matrix<f64>,
    v: Matrix<f64>,
    weights: Matrix<f64>,
    out: Matrix<f64>,
}

struct LayerCache {
    x_in: Matrix<f64>,
    norm1: Norm,
    heads: Vec<HeadCache>,
    x_mid: Matrix<f64>,
    norm2: Norm,
    pre_act: Matrix<f64>,
    act: Matrix<f64>,
}

/// Activations kept for the backward pass.
pub struct ForwardCache {
    positions: Vec<usize>,
    layers: Vec<LayerCache>,
    x_final: Matrix<f64>,
    norm_final: Norm,
    pub logits: Matrix<f64>,
}

fn embed(params: &DecoderParams, batch: &SequenceBatch, positions: &[usize]) -> Matrix<f64> {
    let d = params.config.d_model;
    let mut x = Matrix::zeros(batch.len(), d);
    for (p, (&tok, &pos)) in batch.tokens.iter().zip(positions).enumerate() {
        let row = x.row_mut(p);
        for ((o, &e), &pe) in row
            .iter_mut()
            .zip(params.token_embedding.row(tok))
            .zip(params.position_embedding.row(pos))
        {
            *o = e + pe;
        }
    }
    if let Some(features) = &batch.features {
        x.add_assign(&features.matmul(&params.feature_projection));
    }
    x
}

fn attention_mask_check(mask: &AttentionMask) -> Result<()> {
    match mask.first_empty_row() {
        Some(p) => Err(SlimError::contract(format!(
            "mask row {p} blocks every position"
        ))),
        None => Ok(()),
    }
}

/// Runs the decoder and keeps every intermediate needed by
/// [`backward`].
pub fn forward_with_cache(params: &DecoderParams, batch: &SequenceBatch) -> Result<ForwardCache> {
    batch.validate(&params.config)?;
    attention_mask_check(&batch.mask)?;
    let positions = position_ids(&batch.layout, params.config.position_mode);
    let mut x = embed(params, batch, &positions);
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let norm1 = rms_norm(&x, &layer.attn_norm);
        let mut x_mid = x.clone();
        let mut heads = Vec::with_capacity(layer.heads.len());
        for head in &layer.heads {
            let q = norm1.out.matmul(&head.w_q);
            let k = norm1.out.matmul(&head.w_k);
            let v = norm1.out.matmul(&head.w_v);
            let att = masked_attention(&q, &k, &v, &batch.mask)?;
            x_mid.add_assign(&att.output.matmul(&head.w_o));
            heads.push(HeadCache {
                q,
                k,
                v,
                weights: att.weights,
                out: att.output,
            });
        }
        let norm2 = rms_norm(&x_mid, &layer.ffn_norm);
        let pre_act = norm2.out.matmul(&layer.ffn_in);
        let mut act = pre_act.clone();
        act.as_mut_slice()
            .iter_mut()
            .for_each(|u| *u *= sigmoid(*u));
        let mut x_out = x_mid.clone();
        x_out.add_assign(&act.matmul(&layer.ffn_out));
        layers.push(LayerCache {
            x_in: std::mem::replace(&mut x, x_out),
            norm1,
            heads,
            x_mid,
            norm2,
            pre_act,
            act,
        });
    }
    let norm_final = rms_norm(&x, &params.final_norm);
    let logits = norm_final.out.matmul(&params.unembed);
    Ok(ForwardCache {
        positions,
        layers,
        x_final: x,
        norm_final,
        logits,
    })
}

/// Per-position logits (`n × vocab_size`).
pub fn decoder_forward(params: &DecoderParams, batch: &SequenceBatch) -> Result<Matrix<f64>> {
    forward_with_cache(params, batch).map(|c| c.logits)
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Gradients of a scalar objective given `d_logits = ∂L/∂logits`.
pub fn backward(
    params: &DecoderParams,
    batch: &SequenceBatch,
    cache: &ForwardCache,
    d_logits: &Matrix<f64>,
) -> Gradients {
    let mut grads = params.zeros_like();
    grads.unembed = cache.norm_final.out.t_matmul(d_logits);
    let d_norm = d_logits.matmul_t(&params.unembed);
    let mut dx = rms_norm_backward(
        &cache.x_final,
        &params.final_norm,
        &cache.norm_final.inv_rms,
        &d_norm,
        &mut grads.final_norm,
    );
    let scale = 1.0 / (params.config.d_head as f64).sqrt();

    for (l, (layer, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let gl = &mut grads.layers[l];

        // Feed-forward block.
        gl.ffn_out = lc.act.t_matmul(&dx);
        let mut d_pre = dx.matmul_t(&layer.ffn_out);
        for (g, &u) in d_pre.as_mut_slice().iter_mut().zip(lc.pre_act.as_slice()) {
            let s = sigmoid(u);
            *g *= s + u * s * (1.0 - s);
        }
        gl.ffn_in = lc.norm2.out.t_matmul(&d_pre);
        let d_norm2 = d_pre.matmul_t(&layer.ffn_in);
        let mut d_mid = dx;
        d_mid.add_assign(&rms_norm_backward(
            &lc.x_mid,
            &layer.ffn_norm,
            &lc.norm2.inv_rms,
            &d_norm2,
            &mut gl.ffn_norm,
        ));

        // Attention block.
        let n = d_mid.rows();
        let mut d_norm1 = Matrix::zeros(n, params.config.d_model);
        for ((head, hc), gh) in layer.heads.iter().zip(&lc.heads).zip(&mut gl.heads) {
            gh.w_o = hc.out.t_matmul(&d_mid);
            let d_out = d_mid.matmul_t(&head.w_o);
            let d_weights = d_out.matmul_t(&hc.v);
            gh.w_v = lc.norm1.out.t_matmul(&hc.weights.t_matmul(&d_out));
            let d_v = hc.weights.t_matmul(&d_out);
            let mut d_scores = Matrix::zeros(n, n);
            for p in 0..n {
                let a = hc.weights.row(p);
                let da = d_weights.row(p);
                let inner: f64 = a.iter().zip(da).map(|(x, y)| x * y).sum();
                for (ds, (&ai, &dai)) in d_scores.row_mut(p).iter_mut().zip(a.iter().zip(da)) {
                    *ds = ai * (dai - inner) * scale;
                }
            }
            let d_q = d_scores.matmul(&hc.k);
            let d_k = d_scores.t_matmul(&hc.q);
            gh.w_q = lc.norm1.out.t_matmul(&d_q);
            gh.w_k = lc.norm1.out.t_matmul(&d_k);
            d_norm1.add_assign(&d_q.matmul_t(&head.w_q));
            d_norm1.add_assign(&d_k.matmul_t(&head.w_k));
            d_norm1.add_assign(&d_v.matmul_t(&head.w_v));
        }
        let mut d_in = d_mid;
        d_in.add_assign(&rms_norm_backward(
            &lc.x_in,
            &layer.attn_norm,
            &lc.norm1.inv_rms,
            &d_norm1,
            &mut gl.attn_norm,
        ));
        dx = d_in;
    }

    for (p, (&tok, &pos)) in batch.tokens.iter().zip(&cache.positions).enumerate() {
        let row = dx.row(p);
        for (g, &v) in grads.token_embedding.row_mut(tok).iter_mut().zip(row) {
            *g += v;
        }
        for (g, &v) in grads.position_embedding.row_mut(pos).iter_mut().zip(row) {
            *g += v;
        }
    }
    if let Some(features) = &batch.features {
        grads.feature_projection = features.t_matmul(&dx);
    }
    grads
}

/// NLL of `batch.targets` and its gradient with respect to every weight.
pub fn loss_and_gradients(
    params: &DecoderParams,
    batch: &SequenceBatch,
    reduction: Reduction,
) -> Result<(f64, Gradients)> {
    let cache = forward_with_cache(params, batch)?;
    let span = batch.layout.spans().response;
    let (loss, d_logits) = nll_loss_with_grad(&cache.logits, &batch.targets, span, reduction)?;
    Ok((loss, backward(params, batch, &cache, &d_logits)))
}

/// NLL of `batch.targets` without gradients.
pub fn loss(params: &DecoderParams, batch: &SequenceBatch, reduction: Reduction) -> Result<f64> {
    let logits = decoder_forward(params, batch)?;
    nll_loss(
        &logits,
        &batch.targets,
        batch.layout.spans().response,
        reduction,
    )
}
