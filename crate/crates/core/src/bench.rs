//! Dense vs sparse-gather attention timing on generated scenes.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{masked_attention, sparse_masked_attention};
use crate::error::{Result, SlimError};
use crate::mask::{compose, sparsity_stats, MaskStrategy};
use crate::matrix::Matrix;
use crate::scene::TokenLayout;
use crate::scenegen::{generate_scene, recipe_with_size};

pub const DEFAULT_SIZES: [usize; 4] = [64, 128, 256, 512];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// Object counts to time.
    pub sizes: Vec<usize>,
    pub strategies: Vec<MaskStrategy>,
    pub warmup: usize,
    pub trials: usize,
    pub d_head: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: DEFAULT_SIZES.to_vec(),
            strategies: vec![
                "geo".parse().expect("valid spec"),
                "fixedn:5".parse().expect("valid spec"),
                "full".parse().expect("valid spec"),
            ],
            warmup: 3,
            trials: 21,
            d_head: 32,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return Err(SlimError::config("benchmark sizes must be positive"));
        }
        if self.strategies.is_empty() || self.trials == 0 || self.d_head == 0 {
            return Err(SlimError::config(
                "need at least one strategy, one trial and d_head > 0",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n_objects: usize,
    pub strategy: String,
    pub object_block_density: f64,
    /// Median seconds per call.
    pub dense_seconds: f64,
    pub sparse_seconds: f64,
    /// Largest elementwise difference between the two outputs.
    pub max_abs_diff: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Layout used for every timed sequence: a short prompt around `n` single-token
/// objects.
pub fn bench_layout(n_objects: usize) -> Result<TokenLayout> {
    TokenLayout::new(2, n_objects, 1, 4, 1)
}

fn time_once(f: impl FnOnce() -> Result<Matrix<f64>>) -> Result<(f64, Matrix<f64>)> {
    let start = Instant::now();
    let out = f()?;
    Ok((start.elapsed().as_secs_f64(), out))
}

pub fn run_bench(config: &BenchConfig) -> Result<Vec<BenchRow>> {
    config.validate()?;
    let mut rows = Vec::new();
    for &n in &config.sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (n as u64).wrapping_mul(0x9E37_79B9));
        let scene = generate_scene(&recipe_with_size(n, &mut rng))?;
        let layout = bench_layout(n)?;
        let len = layout.len();
        let q = gaussian(len, config.d_head, &mut rng);
        let k = gaussian(len, config.d_head, &mut rng);
        let v = gaussian(len, config.d_head, &mut rng);
        for strategy in &config.strategies {
            let mask = compose(&scene, &layout, strategy)?;
            let sparse = mask.to_sparse();
            let density = sparsity_stats(&mask).object_block_density.unwrap_or(0.0);
            let mut dense_t = Vec::with_capacity(config.trials);
            let mut sparse_t = Vec::with_capacity(config.trials);
            let mut max_abs_diff = 0.0f64;
            for trial in 0..config.warmup + config.trials {
                let (td, dense_out) =
                    time_once(|| masked_attention(&q, &k, &v, &mask).map(|a| a.output))?;
                let (ts, sparse_out) = time_once(|| sparse_masked_attention(&q, &k, &v, &sparse))?;
                if trial >= config.warmup {
                    dense_t.push(td);
                    sparse_t.push(ts);
                    max_abs_diff = max_abs_diff.max(dense_out.max_abs_diff(&sparse_out));
                }
            }
            rows.push(BenchRow {
                n_objects: n,
                strategy: strategy.label(),
                object_block_density: density,
                dense_seconds: median(dense_t),
                sparse_seconds: median(sparse_t),
                max_abs_diff,
            });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out =
        String::from("n,strategy,object_block_density,dense_seconds,sparse_seconds,max_abs_diff\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{:.6},{:.9},{:.9},{:.3e}",
            r.n_objects,
            r.strategy,
            r.object_block_density,
            r.dense_seconds,
            r.sparse_seconds,
            r.max_abs_diff
        )
        .unwrap();
    }
    out
}
