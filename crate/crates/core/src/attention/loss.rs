//! Negative log-likelihood of response tokens.

use std::ops::Range;

use crate::error::{Result, SlimError};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn check(logits: &Matrix<f64>, targets: &[usize], span: &Range<usize>) -> Result<()> {
    if span.is_empty() {
        return Err(SlimError::contract("loss over an empty response span"));
    }
    if span.end > logits.rows() || targets.len() != span.len() {
        return Err(SlimError::contract(format!(
            "response span {span:?} with {} targets does not fit {} logit rows",
            targets.len(),
            logits.rows()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(SlimError::contract(format!(
            "target {t} outside vocabulary"
        )));
    }
    Ok(())
}

/// `−Σ_l log softmax(logits[span.start + l])[targets[l]]`, summed or
/// averaged over the response.
pub fn nll_loss(
    logits: &Matrix<f64>,
    targets: &[usize],
    span: Range<usize>,
    reduction: Reduction,
) -> Result<f64> {
    nll_loss_with_grad(logits, targets, span, reduction).map(|(loss, _)| loss)
}

/// Loss and its gradient with respect to every logit.
pub fn nll_loss_with_grad(
    logits: &Matrix<f64>,
    targets: &[usize],
    span: Range<usize>,
    reduction: Reduction,
) -> Result<(f64, Matrix<f64>)> {
    check(logits, targets, &span)?;
    let weight = match reduction {
        Reduction::Mean => 1.0 / span.len() as f64,
        Reduction::Sum => 1.0,
    };
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (p, &t) in span.zip(targets) {
        let logp = log_softmax(logits.row(p));
        loss -= logp[t];
        for (g, lp) in grad.row_mut(p).iter_mut().zip(&logp) {
            *g = weight * lp.exp();
        }
        grad[(p, t)] -= weight;
    }
    Ok((loss * weight, grad))
}
