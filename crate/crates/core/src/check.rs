//! Self-verification suites: fast path against the oracle, geometric and
//! permutation invariance, and finite-difference gradients.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::gradcheck::{grad_check_report, GradCheckOptions, InjectedFault};
use crate::attention::model::{DecoderConfig, DecoderParams, PositionMode, SequenceBatch};
use crate::error::Result;
use crate::geo::{DensityProfile, GeoParams};
use crate::mask::{compose, MaskStrategy, MaskVariant};
use crate::matrix::Matrix;
use crate::scene::{format_scene, Point3, SceneObjects, TokenLayout};
use crate::scenegen::{generate_scene, is_tie_free, oracle_mask, recipe_with_size};

pub const DEFAULT_CASES: usize = 1000;
pub const MAX_CHECK_OBJECTS: usize = 64;
/// Relative distance gap below which a generated scene is redrawn.
pub const TIE_TOLERANCE: f64 = 1e-9;
pub const RHO_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckConfig {
    pub seed: u64,
    /// Scenes for the oracle suite; the invariance suite uses a fifth of
    /// this, at least 200.
    pub cases: usize,
    pub geo: GeoParams,
    pub fault: Option<InjectedFault>,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            seed: 0,
            cases: DEFAULT_CASES,
            geo: GeoParams::default(),
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    /// One entry per failing case, with enough detail to replay it.
    pub failures: Vec<String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub suites: Vec<SuiteResult>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            let status = if s.passed() { "pass" } else { "FAIL" };
            writeln!(f, "{:<10} {:>5} cases  {status}", s.name, s.cases)?;
            for failure in &s.failures {
                for line in failure.lines() {
                    writeln!(f, "    {line}")?;
                }
            }
        }
        if self.passed() {
            writeln!(f, "all suites passed")
        } else {
            let n = self.suites.iter().filter(|s| !s.passed()).count();
            writeln!(f, "{n} suite(s) failed")
        }
    }
}

/// A random tie-free scene with `1..=max_objects` objects and a random layout
/// around it.
pub fn random_case(rng: &mut impl Rng, max_objects: usize) -> Result<(SceneObjects, TokenLayout)> {
    let n = rng.random_range(1..=max_objects);
    let scene = loop {
        let scene = generate_scene(&recipe_with_size(n, rng))?;
        if is_tie_free(&scene, TIE_TOLERANCE) {
            break scene;
        }
    };
    let layout = TokenLayout::new(
        rng.random_range(0..=3),
        n,
        rng.random_range(1..=3),
        rng.random_range(0..=4),
        rng.random_range(0..=2),
    )?;
    Ok((scene, layout))
}

/// Every strategy family, with and without the instruction override.
pub fn all_strategies(geo: GeoParams, n_fixed: usize) -> Vec<MaskStrategy> {
    let variants = [
        MaskVariant::Causal,
        MaskVariant::FullAll,
        MaskVariant::FullObjectBlock,
        MaskVariant::DiagonalObjectBlock,
        MaskVariant::FixedN(n_fixed.max(1)),
        MaskVariant::Geo(geo),
    ];
    variants
        .into_iter()
        .flat_map(|v| {
            [false, true].map(|inst| MaskStrategy {
                variant: v,
                inst_mask: inst,
            })
        })
        .collect()
}

fn replay(
    scene: &SceneObjects,
    layout: &TokenLayout,
    strategy: &MaskStrategy,
    what: &str,
) -> String {
    format!(
        "{what}: strategy {strategy} layout {layout:?}\n{}",
        format_scene(scene).trim_end()
    )
}

pub fn oracle_suite(seed: u64, cases: usize, geo: GeoParams) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for _ in 0..cases {
        let (scene, layout) = random_case(&mut rng, MAX_CHECK_OBJECTS)?;
        let random_geo = {
            let lo = rng.random_range(0..=4);
            GeoParams::new(lo, lo + rng.random_range(0..=12))?
        };
        let n_fixed = rng.random_range(1..=8);
        let strategies = all_strategies(geo, n_fixed)
            .into_iter()
            .chain([MaskStrategy::geo(random_geo, rng.random_bool(0.5))]);
        for strategy in strategies {
            if compose(&scene, &layout, &strategy)? != oracle_mask(&scene, &layout, &strategy)? {
                failures.push(replay(&scene, &layout, &strategy, "oracle mismatch"));
            }
        }
    }
    Ok(SuiteResult {
        name: "oracle",
        cases,
        failures,
    })
}

/// Uniformly random rotation via a normalized Gaussian quaternion.
pub fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let mut q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.iter_mut().for_each(|v| *v /= norm);
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// `s·R·p + t` applied to every center.
pub fn similarity_transform(
    scene: &SceneObjects,
    rotation: &[[f64; 3]; 3],
    scale: f64,
    translation: Point3,
) -> Result<SceneObjects> {
    scene.map_centers(|p| {
        let a = p.to_array();
        let r: [f64; 3] =
            std::array::from_fn(|i| rotation[i].iter().zip(a).map(|(m, v)| m * v).sum());
        Point3::new(
            scale * r[0] + translation.x,
            scale * r[1] + translation.y,
            scale * r[2] + translation.z,
        )
    })
}

pub fn invariance_suite(seed: u64, cases: usize, geo: GeoParams) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1A5E);
    let mut failures = Vec::new();
    let strategy = MaskStrategy::geo(geo, true);
    for _ in 0..cases {
        let (scene, layout) = random_case(&mut rng, MAX_CHECK_OBJECTS)?;
        let mask = compose(&scene, &layout, &strategy)?;

        let rotation = random_rotation(&mut rng);
        let scale = 10f64.powf(rng.random_range(-1.0..=1.0));
        let shift = Point3::new(
            rng.random_range(-100.0..100.0),
            rng.random_range(-100.0..100.0),
            rng.random_range(-100.0..100.0),
        );
        let moved = similarity_transform(&scene, &rotation, scale, shift)?;
        let before = DensityProfile::compute(&scene, geo).rho_norm;
        let after = DensityProfile::compute(&moved, geo).rho_norm;
        let drift = before
            .iter()
            .zip(&after)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if drift > RHO_TOLERANCE {
            failures.push(replay(
                &scene,
                &layout,
                &strategy,
                &format!("normalized density moved by {drift:e} (scale {scale})"),
            ));
        }
        if compose(&moved, &layout, &strategy)? != mask {
            failures.push(replay(
                &scene,
                &layout,
                &strategy,
                &format!("mask changed under similarity transform (scale {scale})"),
            ));
        }

        let mut perm: Vec<usize> = (0..scene.len()).collect();
        perm.shuffle(&mut rng);
        if compose(&scene.permuted(&perm)?, &layout, &strategy)? != mask.permute_objects(&perm)? {
            failures.push(replay(
                &scene,
                &layout,
                &strategy,
                &format!("mask not permutation equivariant under {perm:?}"),
            ));
        }
    }
    Ok(SuiteResult {
        name: "invariance",
        cases,
        failures,
    })
}

/// One layer, one head, `d_model = 4`: the gradient-check model.
pub fn tiny_decoder_config() -> DecoderConfig {
    DecoderConfig {
        n_layers: 1,
        n_heads: 1,
        d_model: 4,
        d_head: 4,
        d_ff: 8,
        vocab_size: 7,
        max_positions: 6,
        feature_dim: 3,
        position_mode: PositionMode::SharedObject,
    }
}

/// A six-token sequence (one system token, three objects, one instruction
/// token, one response token) under `strategy`.
pub fn tiny_batch(strategy: &MaskStrategy) -> Result<SequenceBatch> {
    let scene = SceneObjects::from_centers([[0.0, 0.0, 0.0], [0.4, 0.1, 0.0], [2.0, 1.5, 0.3]])?;
    let layout = TokenLayout::new(1, 3, 1, 1, 1)?;
    let features = Matrix::from_fn(6, 3, |r, c| {
        if (1..4).contains(&r) {
            scene.center(r - 1).to_array()[c]
        } else {
            0.0
        }
    });
    Ok(SequenceBatch {
        tokens: vec![0, 3, 4, 5, 1, 2],
        features: Some(features),
        layout,
        mask: compose(&scene, &layout, strategy)?,
        targets: vec![4],
    })
}

pub fn gradient_suite(seed: u64, fault: Option<InjectedFault>) -> Result<SuiteResult> {
    let params = DecoderParams::init(&tiny_decoder_config(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let options = GradCheckOptions {
        samples_per_tensor: usize::MAX,
        seed,
        fault,
        ..GradCheckOptions::default()
    };
    let strategies = all_strategies(GeoParams::new(1, 2)?, 2);
    let mut failures = Vec::new();
    for strategy in &strategies {
        let report = grad_check_report(&params, &[tiny_batch(strategy)?], &options)?;
        if let Err(e) = report.ensure_passed() {
            failures.push(format!("strategy {strategy}: {e}"));
        }
    }
    Ok(SuiteResult {
        name: "gradient",
        cases: strategies.len(),
        failures,
    })
}

pub fn run_checks(config: &CheckConfig) -> Result<CheckReport> {
    Ok(CheckReport {
        suites: vec![
            oracle_suite(config.seed, config.cases, config.geo)?,
            invariance_suite(config.seed, (config.cases / 5).max(200), config.geo)?,
            gradient_suite(config.seed, config.fault.clone())?,
        ],
    })
}
