//! Masked scaled-dot-product attention and a small decoder built on it.
//!
//! Blocked entries are excluded from the softmax rather than added as −∞, so
//! their weights are exactly zero and fully blocked rows are reported as an
//! error instead of producing NaN.

pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod train;

use crate::error::{Result, SlimError};
use crate::mask::{AttentionMask, SparseMask};
use crate::matrix::{dot, Matrix};

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use loss::{nll_loss, Reduction};
pub use model::{DecoderConfig, DecoderParams, Gradients, PositionMode, SequenceBatch};
pub use train::{toy_train, TrainConfig, TrainMetrics};

/// Attention weights and the attended values.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub weights: Matrix<f64>,
    pub output: Matrix<f64>,
}

fn check_shapes(q: &Matrix<f64>, k: &Matrix<f64>, v: &Matrix<f64>, n_mask: usize) -> Result<()> {
    let n = q.rows();
    if k.rows() != n || v.rows() != n || n_mask != n {
        return Err(SlimError::config(format!(
            "sequence lengths differ: Q {}, K {}, V {}, mask {n_mask}",
            n,
            k.rows(),
            v.rows()
        )));
    }
    if q.cols() != k.cols() || q.cols() == 0 {
        return Err(SlimError::config(format!(
            "query width {} and key width {} must match and be positive",
            q.cols(),
            k.cols()
        )));
    }
    Ok(())
}

/// Softmax over the allowed entries of one row of scores. Writes weights
/// into `out` and leaves blocked entries untouched (callers pass zeros).
fn softmax_allowed(scores: &[f64], allowed: impl Iterator<Item = usize> + Clone, out: &mut [f64]) {
    let max = allowed
        .clone()
        .map(|q| scores[q])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for q in allowed.clone() {
        let e = (scores[q] - max).exp();
        out[q] = e;
        sum += e;
    }
    for q in allowed {
        out[q] /= sum;
    }
}

/// `softmax(QKᵀ/√d + M)·V`, computing every score and then excluding the
/// blocked ones.
pub fn masked_attention(
    q: &Matrix<f64>,
    k: &Matrix<f64>,
    v: &Matrix<f64>,
    mask: &AttentionMask,
) -> Result<AttentionOutput> {
    check_shapes(q, k, v, mask.len())?;
    if let Some(p) = mask.first_empty_row() {
        return Err(SlimError::contract(format!(
            "mask row {p} blocks every position"
        )));
    }
    let n = q.rows();
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut scores = q.matmul_t(k);
    scores.as_mut_slice().iter_mut().for_each(|s| *s *= scale);

    let mut weights = Matrix::zeros(n, n);
    for p in 0..n {
        let row = mask.allow().row(p);
        let allowed = (0..n).filter(|&c| row[c]);
        softmax_allowed(scores.row(p), allowed, weights.row_mut(p));
    }
    let output = weights.matmul(v);
    Ok(AttentionOutput { weights, output })
}

/// Same result as [`masked_attention`] but only touches allowed entries.
/// Returns the output rows; weights are never materialized densely.
pub fn sparse_masked_attention(
    q: &Matrix<f64>,
    k: &Matrix<f64>,
    v: &Matrix<f64>,
    mask: &SparseMask,
) -> Result<Matrix<f64>> {
    check_shapes(q, k, v, mask.rows())?;
    let n = q.rows();
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut output = Matrix::zeros(n, v.cols());
    let mut scores = Vec::new();
    for p in 0..n {
        let cols = mask.row(p);
        if cols.is_empty() {
            return Err(SlimError::contract(format!(
                "mask row {p} blocks every position"
            )));
        }
        let qp = q.row(p);
        scores.clear();
        scores.extend(cols.iter().map(|&c| dot(qp, k.row(c)) * scale));
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        let out = output.row_mut(p);
        for (&c, &s) in cols.iter().zip(&scores) {
            let w = s / sum;
            for (o, &x) in out.iter_mut().zip(v.row(c)) {
                *o += w * x;
            }
        }
    }
    Ok(output)
}
