//! Central finite-difference verification of the analytic gradients.

use std::fmt;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::Reduction;
use super::model::{loss, loss_and_gradients, DecoderParams, SequenceBatch};
use crate::error::{Result, SlimError};

/// Perturbs one analytic gradient entry before comparison, to prove the
/// checker catches errors.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectedFault {
    pub tensor: String,
    pub index: usize,
    pub offset: f64,
}

impl InjectedFault {
    /// Corrupts the first `W_V` entry of the first head.
    pub fn value_projection() -> Self {
        InjectedFault {
            tensor: "layer0.head0.w_v".to_string(),
            index: 0,
            offset: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Coordinates sampled per tensor; tensors smaller than this are checked
    /// exhaustively.
    pub samples_per_tensor: usize,
    pub seed: u64,
    pub reduction: Reduction,
    pub fault: Option<InjectedFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            tolerance: 1e-4,
            samples_per_tensor: 12,
            seed: 0,
            reduction: Reduction::Mean,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl fmt::Display for GradCheckEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}[{},{}] analytic={:.9e} numeric={:.9e} rel_err={:.3e}",
            self.tensor, self.row, self.col, self.analytic, self.numeric, self.rel_error
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub tolerance: f64,
    /// Every checked coordinate, worst relative error first.
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.first().map_or(0.0, |e| e.rel_error)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries
            .iter()
            .filter(|e| e.rel_error.is_nan() || e.rel_error > self.tolerance)
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    /// `Err` listing every failing coordinate when the check did not pass.
    pub fn ensure_passed(&self) -> Result<()> {
        if self.passed() {
            return Ok(());
        }
        let lines: Vec<String> = self.failures().map(ToString::to_string).collect();
        Err(SlimError::GradCheck(format!(
            "{} of {} coordinates exceed tolerance {:e}:\n  {}",
            lines.len(),
            self.checked,
            self.tolerance,
            lines.join("\n  ")
        )))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "gradient check: {} coordinates, max rel error {:.3e} (tolerance {:e}) -> {}",
            self.checked,
            self.max_rel_error(),
            self.tolerance,
            if self.passed() { "pass" } else { "FAIL" }
        )?;
        for e in self.entries.iter().take(5) {
            writeln!(f, "  {e}")?;
        }
        Ok(())
    }
}

/// Mean loss over `batches`.
fn total_loss(
    params: &DecoderParams,
    batches: &[SequenceBatch],
    reduction: Reduction,
) -> Result<f64> {
    let mut sum = 0.0;
    for b in batches {
        sum += loss(params, b, reduction)?;
    }
    Ok(sum / batches.len() as f64)
}

/// Compares analytic gradients of the mean loss over `batches` with central
/// differences on a seeded sample of coordinates. Always returns the report;
/// use [`GradCheckReport::ensure_passed`] or [`grad_check`] to turn failures
/// into errors.
pub fn grad_check_report(
    params: &DecoderParams,
    batches: &[SequenceBatch],
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if batches.is_empty() {
        return Err(SlimError::contract(
            "gradient check needs at least one sequence",
        ));
    }
    let mut analytic = params.zeros_like();
    for b in batches {
        let (_, g) = loss_and_gradients(params, b, options.reduction)?;
        analytic.axpy(1.0 / batches.len() as f64, &g);
    }
    if let Some(fault) = &options.fault {
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        let t = names
            .iter()
            .position(|n| *n == fault.tensor)
            .ok_or_else(|| SlimError::config(format!("no tensor named `{}`", fault.tensor)))?;
        analytic.tensors_mut()[t].as_mut_slice()[fault.index] += fault.offset;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let shapes: Vec<(String, usize, usize)> = params
        .tensors()
        .into_iter()
        .map(|(name, t)| (name, t.rows(), t.cols()))
        .collect();
    let analytic_values: Vec<Vec<f64>> = analytic
        .tensors()
        .into_iter()
        .map(|(_, t)| t.as_slice().to_vec())
        .collect();

    let mut probe = params.clone();
    let mut entries = Vec::new();
    for (t, (name, rows, cols)) in shapes.iter().enumerate() {
        let len = rows * cols;
        if len == 0 {
            continue;
        }
        let mut picks: Vec<usize> = if len <= options.samples_per_tensor {
            (0..len).collect()
        } else {
            index::sample(&mut rng, len, options.samples_per_tensor).into_vec()
        };
        if let Some(fault) = options.fault.as_ref().filter(|f| f.tensor == *name) {
            if !picks.contains(&fault.index) {
                picks.push(fault.index);
            }
        }
        picks.sort_unstable();
        for idx in picks {
            let original = probe.tensors_mut()[t].as_slice()[idx];
            probe.tensors_mut()[t].as_mut_slice()[idx] = original + options.epsilon;
            let up = total_loss(&probe, batches, options.reduction)?;
            probe.tensors_mut()[t].as_mut_slice()[idx] = original - options.epsilon;
            let down = total_loss(&probe, batches, options.reduction)?;
            probe.tensors_mut()[t].as_mut_slice()[idx] = original;

            let numeric = (up - down) / (2.0 * options.epsilon);
            let a = analytic_values[t][idx];
            let rel_error = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            entries.push(GradCheckEntry {
                tensor: name.clone(),
                row: idx / cols,
                col: idx % cols,
                analytic: a,
                numeric,
                rel_error,
            });
        }
    }
    entries.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    Ok(GradCheckReport {
        checked: entries.len(),
        tolerance: options.tolerance,
        entries,
    })
}

/// Like [`grad_check_report`] but fails with [`SlimError::GradCheck`] when
/// any coordinate exceeds the tolerance.
pub fn grad_check(
    params: &DecoderParams,
    batches: &[SequenceBatch],
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let report = grad_check_report(params, batches, options)?;
    report.ensure_passed()?;
    Ok(report)
}
