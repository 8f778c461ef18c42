//! Strategy × seed sweeps of `toy_train` and the resulting accuracy table.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::attention::train::{toy_train, TrainConfig, TrainMetrics};
use crate::error::Result;
use crate::geo::GeoParams;
use crate::mask::{MaskStrategy, DEFAULT_N_FIXED};

/// Row order of the ablation table.
pub const ABLATION_SPECS: [&str; 8] = [
    "causal",
    "fullall",
    "full",
    "diag",
    "fixedn",
    "geo",
    "geo+inst",
    "causal+inst",
];

pub const DEFAULT_SEEDS: u64 = 5;

pub fn ablation_strategies(geo: GeoParams, n_fixed: usize) -> Result<Vec<MaskStrategy>> {
    ABLATION_SPECS
        .iter()
        .map(|spec| {
            let spec = if *spec == "fixedn" {
                format!("fixedn:{n_fixed}")
            } else {
                spec.to_string()
            };
            MaskStrategy::parse(&spec, geo)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub train: TrainConfig,
    pub strategies: Vec<MaskStrategy>,
    pub seeds: Vec<u64>,
}

impl AblationConfig {
    pub fn new(train: TrainConfig, n_seeds: u64) -> Self {
        AblationConfig {
            train,
            strategies: ablation_strategies(GeoParams::default(), DEFAULT_N_FIXED)
                .expect("built-in specs parse"),
            seeds: (0..n_seeds).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationCell {
    pub seed: u64,
    /// Training failures are kept per cell so one bad run does not abort
    /// the sweep.
    pub outcome: std::result::Result<TrainMetrics, String>,
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub strategy: String,
    pub cells: Vec<AblationCell>,
}

impl AblationRow {
    pub fn accuracies(&self) -> Vec<f64> {
        self.cells
            .iter()
            .filter_map(|c| c.outcome.as_ref().ok().map(TrainMetrics::final_accuracy))
            .collect()
    }

    pub fn mean(&self) -> f64 {
        let a = self.accuracies();
        if a.is_empty() {
            return f64::NAN;
        }
        a.iter().sum::<f64>() / a.len() as f64
    }

    /// Sample standard deviation; zero for a single run.
    pub fn sd(&self) -> f64 {
        let a = self.accuracies();
        if a.len() < 2 {
            return if a.is_empty() { f64::NAN } else { 0.0 };
        }
        let m = self.mean();
        (a.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (a.len() - 1) as f64).sqrt()
    }

    pub fn failures(&self) -> impl Iterator<Item = (u64, &str)> {
        self.cells
            .iter()
            .filter_map(|c| c.outcome.as_ref().err().map(|e| (c.seed, e.as_str())))
    }
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.strategy == label)
    }

    pub fn has_failures(&self) -> bool {
        self.rows.iter().any(|r| r.failures().next().is_some())
    }

    /// One line per strategy: mean, sd, then the accuracy of every seed
    /// (empty when that run failed).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,mean_accuracy,sd_accuracy,runs");
        for s in &self.seeds {
            write!(out, ",seed{s}").unwrap();
        }
        out.push('\n');
        for r in &self.rows {
            write!(
                out,
                "{},{:.6},{:.6},{}",
                r.strategy,
                r.mean(),
                r.sd(),
                r.accuracies().len()
            )
            .unwrap();
            for c in &r.cells {
                match &c.outcome {
                    Ok(m) => write!(out, ",{:.6}", m.final_accuracy()).unwrap(),
                    Err(_) => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.strategy.len())
            .max()
            .unwrap_or(8)
            .max(8);
        let mut out = format!("{:<width$}  {:>16}  runs\n", "strategy", "accuracy (%)");
        for r in &self.rows {
            let cell = format!("{:.2} ± {:.2}", 100.0 * r.mean(), 100.0 * r.sd());
            writeln!(
                out,
                "{:<width$}  {:>16}  {}/{}",
                r.strategy,
                cell,
                r.accuracies().len(),
                r.cells.len()
            )
            .unwrap();
            for (seed, e) in r.failures() {
                writeln!(out, "{:<width$}    seed {seed} failed: {e}", "").unwrap();
            }
        }
        out
    }
}

/// Runs every (strategy, seed) cell, in parallel, and assembles the table
/// in strategy order.
pub fn run_ablation(config: &AblationConfig) -> Result<AblationTable> {
    config.train.validate()?;
    let cells: Vec<(usize, u64)> = (0..config.strategies.len())
        .flat_map(|s| config.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let outcomes: Vec<AblationCell> = cells
        .par_iter()
        .map(|&(s, seed)| AblationCell {
            seed,
            outcome: toy_train(&config.train, &config.strategies[s], seed)
                .map_err(|e| e.to_string()),
        })
        .collect();
    let mut outcomes = outcomes.into_iter();
    let rows = config
        .strategies
        .iter()
        .map(|strategy| AblationRow {
            strategy: strategy.label(),
            cells: outcomes.by_ref().take(config.seeds.len()).collect(),
        })
        .collect();
    Ok(AblationTable {
        seeds: config.seeds.clone(),
        rows,
    })
}
