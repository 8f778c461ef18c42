//! Synthetic scenes with clustered and sparse regions, grounding tasks built
//! on them, and a naive reference mask builder.

pub mod grounding;
pub mod oracle;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SlimError};
use crate::scene::{Point3, SceneObject, SceneObjects};

pub use grounding::{generate_grounding_task, Descriptor, GroundingTask, GroundingVocab};
pub use oracle::{oracle_geo_mask, oracle_mask};

/// Coordinates beyond this magnitude are rejected as infeasible.
const MAX_COORDINATE: f64 = 1e9;
const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// Parameters of a clustered synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecipe {
    pub n_clusters: usize,
    /// Inclusive bounds on the number of objects drawn for each cluster.
    pub objects_per_cluster: (usize, usize),
    pub cluster_radius: f64,
    /// Minimum distance between cluster anchors.
    pub cluster_spacing: f64,
    pub outlier_count: usize,
    pub seed: u64,
}

impl Default for SceneRecipe {
    fn default() -> Self {
        SceneRecipe {
            n_clusters: 4,
            objects_per_cluster: (3, 7),
            cluster_radius: 0.6,
            cluster_spacing: 4.0,
            outlier_count: 4,
            seed: 0,
        }
    }
}

impl SceneRecipe {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.objects_per_cluster;
        if self.n_clusters == 0 {
            return Err(SlimError::config("n_clusters must be positive"));
        }
        if lo > hi {
            return Err(SlimError::config(
                "objects_per_cluster lower bound exceeds upper bound",
            ));
        }
        if !(self.cluster_radius > 0.0 && self.cluster_radius.is_finite())
            || !(self.cluster_spacing > 0.0 && self.cluster_spacing.is_finite())
        {
            return Err(SlimError::config(
                "cluster_radius and cluster_spacing must be positive",
            ));
        }
        if lo == 0 && hi == 0 && self.outlier_count == 0 {
            return Err(SlimError::config("recipe produces no objects"));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SceneRecipe {
            seed,
            ..self.clone()
        }
    }

    /// Parses `key=value` lines; unknown keys are errors and missing keys keep
    /// their defaults. `objects_per_cluster` accepts `5` or `3-7`.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut recipe = SceneRecipe::default();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SlimError::parse(
                    origin,
                    lineno,
                    format!("expected key=value, found `{line}`"),
                )
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad =
                |what: &str| SlimError::parse(origin, lineno, format!("{key}: {what} `{value}`"));
            match key {
                "n_clusters" => {
                    recipe.n_clusters = value.parse().map_err(|_| bad("not an integer"))?
                }
                "objects_per_cluster" => {
                    recipe.objects_per_cluster = match value.split_once('-') {
                        Some((a, b)) => (
                            a.trim().parse().map_err(|_| bad("bad range"))?,
                            b.trim().parse().map_err(|_| bad("bad range"))?,
                        ),
                        None => {
                            let n = value.parse().map_err(|_| bad("not an integer"))?;
                            (n, n)
                        }
                    }
                }
                "cluster_radius" => {
                    recipe.cluster_radius = value.parse().map_err(|_| bad("not a number"))?
                }
                "cluster_spacing" => {
                    recipe.cluster_spacing = value.parse().map_err(|_| bad("not a number"))?
                }
                "outlier_count" => {
                    recipe.outlier_count = value.parse().map_err(|_| bad("not an integer"))?
                }
                "seed" => recipe.seed = value.parse().map_err(|_| bad("not an integer"))?,
                _ => {
                    return Err(SlimError::parse(
                        origin,
                        lineno,
                        format!("unknown key `{key}`"),
                    ))
                }
            }
        }
        recipe
            .validate()
            .map_err(|e| SlimError::parse(origin, text.lines().count().max(1), e.to_string()))?;
        Ok(recipe)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        SceneRecipe::parse(&fs::read_to_string(path)?, path)
    }
}

/// A generated scene together with its construction labels.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedScene {
    pub scene: SceneObjects,
    /// Cluster index of each object (in scene order); `None` for outliers.
    pub cluster_of: Vec<Option<usize>>,
    pub anchors: Vec<Point3>,
}

impl GeneratedScene {
    pub fn cluster_members(&self, cluster: usize) -> Vec<usize> {
        (0..self.cluster_of.len())
            .filter(|&i| self.cluster_of[i] == Some(cluster))
            .collect()
    }
}

fn sample_in_ball(rng: &mut impl Rng, radius: f64) -> [f64; 3] {
    loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let r2: f64 = v.iter().map(|x| x * x).sum();
        if r2 <= 1.0 {
            return v.map(|x| x * radius);
        }
    }
}

/// Sub-micrometer offsets stepping by irrational increments, so exact
/// distance ties do not survive generation.
fn jitter(i: usize, scale: f64) -> [f64; 3] {
    const STEPS: [f64; 3] = [
        0.618_033_988_749_894_9,
        0.414_213_562_373_095_1,
        0.732_050_807_568_877_2,
    ];
    STEPS.map(|s| ((i as f64 + 1.0) * s).fract() * 1e-7 * scale)
}

/// Deterministic clustered scene with shuffled object order.
pub fn generate_labeled_scene(recipe: &SceneRecipe) -> Result<GeneratedScene> {
    recipe.validate()?;
    let r = recipe.cluster_radius;
    let spacing = recipe.cluster_spacing;
    if spacing <= 4.0 * r {
        return Err(SlimError::Generation(format!(
            "cluster_spacing {spacing} must exceed four cluster radii ({})",
            4.0 * r
        )));
    }
    let side = spacing * ((recipe.n_clusters as f64).sqrt().ceil() + 1.0) * 1.5;
    if !(side.is_finite() && side < MAX_COORDINATE) {
        return Err(SlimError::Generation(format!(
            "scene extent {side} exceeds the supported coordinate range"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let height = spacing * 0.5;
    let random_point = |rng: &mut ChaCha8Rng| {
        Point3::new(
            rng.random_range(0.0..side),
            rng.random_range(0.0..side),
            rng.random_range(0.0..height),
        )
    };

    let mut anchors: Vec<Point3> = Vec::with_capacity(recipe.n_clusters);
    let mut attempts = 0;
    while anchors.len() < recipe.n_clusters {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(SlimError::Generation(
                "could not place cluster anchors".into(),
            ));
        }
        let p = random_point(&mut rng);
        if anchors.iter().all(|a| a.distance(&p) >= spacing) {
            anchors.push(p);
        }
    }

    let mut placed: Vec<(Point3, Option<usize>)> = Vec::new();
    for (c, anchor) in anchors.iter().enumerate() {
        let count = rng.random_range(recipe.objects_per_cluster.0..=recipe.objects_per_cluster.1);
        for _ in 0..count {
            let off = sample_in_ball(&mut rng, r);
            placed.push((
                Point3::new(anchor.x + off[0], anchor.y + off[1], anchor.z + off[2]),
                Some(c),
            ));
        }
    }

    let mut outliers: Vec<Point3> = Vec::with_capacity(recipe.outlier_count);
    attempts = 0;
    while outliers.len() < recipe.outlier_count {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(SlimError::Generation("could not place outliers".into()));
        }
        let p = random_point(&mut rng);
        let far_from_anchors = anchors.iter().all(|a| a.distance(&p) >= spacing * 0.5 + r);
        let far_from_outliers = outliers.iter().all(|o| o.distance(&p) >= spacing * 0.25);
        if far_from_anchors && far_from_outliers {
            outliers.push(p);
        }
    }
    placed.extend(outliers.into_iter().map(|p| (p, None)));

    placed.shuffle(&mut rng);
    let mut cluster_of = Vec::with_capacity(placed.len());
    let objects = placed
        .into_iter()
        .enumerate()
        .map(|(i, (p, c))| {
            cluster_of.push(c);
            let j = jitter(i, r);
            SceneObject {
                id: format!("OBJ{i:03}"),
                center: Point3::new(p.x + j[0], p.y + j[1], p.z + j[2]),
            }
        })
        .collect();
    Ok(GeneratedScene {
        scene: SceneObjects::new(objects)?,
        cluster_of,
        anchors,
    })
}

pub fn generate_scene(recipe: &SceneRecipe) -> Result<SceneObjects> {
    generate_labeled_scene(recipe).map(|g| g.scene)
}

/// A random recipe whose scene has exactly `n` objects.
pub fn recipe_with_size(n: usize, rng: &mut impl Rng) -> SceneRecipe {
    assert!(n >= 1);
    let n_clusters = rng.random_range(1..=n.clamp(1, 6));
    let outlier_count = rng.random_range(0..=(n - n_clusters).min(6));
    let per_cluster = (n - outlier_count) / n_clusters;
    let remainder = (n - outlier_count) % n_clusters;
    // Equal cluster sizes keep the count exact; the remainder becomes outliers.
    SceneRecipe {
        n_clusters,
        objects_per_cluster: (per_cluster, per_cluster),
        cluster_radius: rng.random_range(0.3..1.5),
        cluster_spacing: rng.random_range(6.5..12.0),
        outlier_count: outlier_count + remainder,
        seed: rng.random(),
    }
}

/// True when no row of the distance matrix has two entries within a relative
/// gap of `rel_tol`, so neighbor rankings are stable under rounding.
pub fn is_tie_free(scene: &SceneObjects, rel_tol: f64) -> bool {
    let n = scene.len();
    let mut row = Vec::with_capacity(n);
    for i in 0..n {
        row.clear();
        row.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| scene.center(i).distance(&scene.center(j))),
        );
        row.sort_by(f64::total_cmp);
        if row
            .windows(2)
            .any(|w| w[1] - w[0] <= rel_tol * w[1].abs().max(f64::MIN_POSITIVE))
        {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cluster_stays_within_diameter() {
        let recipe = SceneRecipe {
            n_clusters: 1,
            objects_per_cluster: (5, 5),
            outlier_count: 0,
            ..SceneRecipe::default()
        };
        let g = generate_labeled_scene(&recipe).unwrap();
        assert_eq!(g.scene.len(), 5);
        let limit = 2.0 * recipe.cluster_radius + 1e-6;
        for a in g.scene.centers() {
            for b in g.scene.centers() {
                assert!(a.distance(&b) <= limit);
            }
        }
    }

    #[test]
    fn distant_clusters_separate_cleanly() {
        let recipe = SceneRecipe {
            n_clusters: 2,
            objects_per_cluster: (4, 6),
            outlier_count: 0,
            seed: 9,
            ..SceneRecipe::default()
        };
        let g = generate_labeled_scene(&recipe).unwrap();
        let n = g.scene.len();
        let (mut intra_max, mut inter_min) = (0.0f64, f64::INFINITY);
        for i in 0..n {
            for j in i + 1..n {
                let d = g.scene.center(i).distance(&g.scene.center(j));
                if g.cluster_of[i] == g.cluster_of[j] {
                    intra_max = intra_max.max(d);
                } else {
                    inter_min = inter_min.min(d);
                }
            }
        }
        assert!(inter_min > intra_max, "{inter_min} <= {intra_max}");
    }

    #[test]
    fn same_seed_same_scene() {
        let recipe = SceneRecipe::default().with_seed(42);
        assert_eq!(
            generate_scene(&recipe).unwrap(),
            generate_scene(&recipe).unwrap()
        );
        assert_ne!(
            generate_scene(&recipe).unwrap(),
            generate_scene(&recipe.with_seed(43)).unwrap()
        );
    }

    #[test]
    fn infeasible_recipes_fail() {
        let huge = SceneRecipe {
            cluster_spacing: 1e12,
            ..SceneRecipe::default()
        };
        assert!(matches!(
            generate_scene(&huge),
            Err(SlimError::Generation(_))
        ));
        let overlapping = SceneRecipe {
            cluster_spacing: 1.0,
            cluster_radius: 0.5,
            ..SceneRecipe::default()
        };
        assert!(matches!(
            generate_scene(&overlapping),
            Err(SlimError::Generation(_))
        ));
        let empty = SceneRecipe {
            objects_per_cluster: (0, 0),
            outlier_count: 0,
            ..SceneRecipe::default()
        };
        assert!(generate_scene(&empty).is_err());
    }

    #[test]
    fn recipe_with_size_hits_the_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..=64 {
            let recipe = recipe_with_size(n, &mut rng);
            assert_eq!(generate_scene(&recipe).unwrap().len(), n, "{recipe:?}");
        }
    }

    #[test]
    fn recipe_file_parsing() {
        let text = "# demo\nn_clusters=3\nobjects_per_cluster=2-5\ncluster_radius=0.5\n\nseed=11\n";
        let r = SceneRecipe::parse(text, Path::new("r")).unwrap();
        assert_eq!(r.n_clusters, 3);
        assert_eq!(r.objects_per_cluster, (2, 5));
        assert_eq!(r.seed, 11);
        assert_eq!(r.outlier_count, SceneRecipe::default().outlier_count);
        assert!(SceneRecipe::parse("bogus=1\n", Path::new("r")).is_err());
        assert!(SceneRecipe::parse("objects_per_cluster=5-2\n", Path::new("r")).is_err());
        assert!(SceneRecipe::parse("cluster_radius=-1\n", Path::new("r")).is_err());
    }

    #[test]
    fn generated_scenes_are_tie_free() {
        for seed in 0..20 {
            let s = generate_scene(&SceneRecipe::default().with_seed(seed)).unwrap();
            assert!(is_tie_free(&s, 1e-12));
        }
        let tied = SceneObjects::from_centers([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
            .unwrap();
        assert!(!is_tie_free(&tied, 1e-12));
    }
}
