//! Geometry-adaptive neighborhoods.
//!
//! Every object gets a local density `rho_i = 1 - mean_j d_ij`, min-max
//! normalized across the scene. The normalized density maps linearly onto a
//! neighbor budget in `[k_min, k_max]`, and each object may attend to that
//! many of its nearest neighbors plus itself. Dense regions therefore get wide
//! attention and isolated objects a narrow one.

use std::cmp::Ordering;

use crate::error::{Result, SlimError};
use crate::matrix::Matrix;
use crate::scene::SceneObjects;

pub const DEFAULT_K_MIN: usize = 2;
pub const DEFAULT_K_MAX: usize = 10;

/// Lower and upper bounds of the attentive neighborhood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GeoParams {
    k_min: usize,
    k_max: usize,
}

impl GeoParams {
    pub fn new(k_min: usize, k_max: usize) -> Result<Self> {
        if k_min > k_max {
            return Err(SlimError::config(format!(
                "k_min ({k_min}) must not exceed k_max ({k_max})"
            )));
        }
        Ok(GeoParams { k_min, k_max })
    }

    pub fn k_min(&self) -> usize {
        self.k_min
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }
}

impl Default for GeoParams {
    fn default() -> Self {
        GeoParams {
            k_min: DEFAULT_K_MIN,
            k_max: DEFAULT_K_MAX,
        }
    }
}

/// Per-object density quantities for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityProfile {
    pub pairwise_d: Matrix<f64>,
    pub rho: Vec<f64>,
    pub rho_norm: Vec<f64>,
    pub k: Vec<usize>,
}

impl DensityProfile {
    pub fn compute(scene: &SceneObjects, params: GeoParams) -> Self {
        let pairwise_d = pairwise_distances(scene);
        let (rho, rho_norm) = local_density(&pairwise_d);
        let k = adaptive_k(&rho_norm, params, scene.len());
        DensityProfile {
            pairwise_d,
            rho,
            rho_norm,
            k,
        }
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }
}

/// The attentive neighborhood of each object. Never contains the object
/// itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSets {
    omega: Vec<Vec<usize>>,
}

impl NeighborSets {
    pub fn new(omega: Vec<Vec<usize>>) -> Result<Self> {
        let n = omega.len();
        for (i, set) in omega.iter().enumerate() {
            let mut seen = vec![false; n];
            for &j in set {
                if j >= n || j == i || std::mem::replace(&mut seen[j], true) {
                    return Err(SlimError::contract(format!(
                        "invalid neighbor {j} in the neighborhood of object {i}"
                    )));
                }
            }
        }
        Ok(NeighborSets { omega })
    }

    /// Neighbors of object `i`, nearest first.
    pub fn of(&self, i: usize) -> &[usize] {
        &self.omega[i]
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.omega[i].contains(&j)
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.omega.iter().map(Vec::as_slice)
    }
}

/// Euclidean distances between all object centers.
pub fn pairwise_distances(scene: &SceneObjects) -> Matrix<f64> {
    let n = scene.len();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let dist = scene.center(i).distance(&scene.center(j));
            d[(i, j)] = dist;
            d[(j, i)] = dist;
        }
    }
    d
}

/// Raw and min-max normalized local density.
///
/// A scene with a single object, or with all densities equal, normalizes to
/// 1 everywhere so every object gets the widest neighborhood available.
pub fn local_density(d: &Matrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = d.rows();
    assert_eq!(n, d.cols(), "distance matrix must be square");
    if n <= 1 {
        return (vec![1.0; n], vec![1.0; n]);
    }
    let denom = (n - 1) as f64;
    let rho: Vec<f64> = (0..n)
        .map(|i| {
            let sum: f64 = d
                .row(i)
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, v)| v)
                .sum();
            1.0 - sum / denom
        })
        .collect();
    let rho_min = rho.iter().copied().fold(f64::INFINITY, f64::min);
    let rho_max = rho.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = rho_max - rho_min;
    let rho_norm = if span > 0.0 {
        rho.iter().map(|r| (r - rho_min) / span).collect()
    } else {
        vec![1.0; n]
    };
    (rho, rho_norm)
}

/// Maps normalized densities to neighbor counts, rounding half away from
/// zero and clamping to the `n_objects - 1` available neighbors.
pub fn adaptive_k(rho_norm: &[f64], params: GeoParams, n_objects: usize) -> Vec<usize> {
    let cap = n_objects.saturating_sub(1) as f64;
    let lo = params.k_min as f64;
    let range = (params.k_max - params.k_min) as f64;
    rho_norm
        .iter()
        .map(|&r| (range * r + lo).round().clamp(0.0, cap) as usize)
        .collect()
}

/// The `k[i]` nearest other objects of each object, ties going to the lower
/// index.
pub fn topk_neighbors(d: &Matrix<f64>, k: &[usize]) -> Result<NeighborSets> {
    let n = d.rows();
    if k.len() != n {
        return Err(SlimError::contract(format!(
            "{} neighbor counts for {n} objects",
            k.len()
        )));
    }
    let mut omega = Vec::with_capacity(n);
    let mut candidates: Vec<usize> = Vec::with_capacity(n);
    for (i, &ki) in k.iter().enumerate() {
        if ki > n.saturating_sub(1) {
            return Err(SlimError::contract(format!(
                "object {i} asks for {ki} neighbors but only {} exist",
                n.saturating_sub(1)
            )));
        }
        let row = d.row(i);
        candidates.clear();
        candidates.extend((0..n).filter(|&j| j != i));
        let by_distance = |a: &usize, b: &usize| row[*a].total_cmp(&row[*b]).then_with(|| a.cmp(b));
        if ki < candidates.len() && ki > 0 {
            candidates.select_nth_unstable_by(ki - 1, by_distance);
        }
        candidates.truncate(ki);
        candidates.sort_unstable_by(by_distance);
        omega.push(candidates.clone());
    }
    Ok(NeighborSets { omega })
}

/// Object-level allow matrix: `i` may attend to `j` iff `j` is `i` or one of
/// its neighbors. Generally not symmetric.
pub fn geo_object_mask(omega: &NeighborSets) -> Matrix<bool> {
    let n = omega.len();
    let mut allow = Matrix::filled(n, n, false);
    for (i, set) in omega.iter().enumerate() {
        allow[(i, i)] = true;
        for &j in set {
            allow[(i, j)] = true;
        }
    }
    allow
}

/// Full geometry-adaptive pipeline for one scene.
#[derive(Debug, Clone)]
pub struct GeoMask {
    pub profile: DensityProfile,
    pub neighbors: NeighborSets,
    pub allow: Matrix<bool>,
}

impl GeoMask {
    pub fn build(scene: &SceneObjects, params: GeoParams) -> Self {
        let profile = DensityProfile::compute(scene, params);
        let neighbors =
            topk_neighbors(&profile.pairwise_d, &profile.k).expect("adaptive_k respects N-1");
        let allow = geo_object_mask(&neighbors);
        GeoMask {
            profile,
            neighbors,
            allow,
        }
    }
}

/// Plain kNN with the same `n` for every object (clamped to `N - 1`).
pub fn fixed_neighbors(scene: &SceneObjects, n_fixed: usize) -> NeighborSets {
    let d = pairwise_distances(scene);
    let k = vec![n_fixed.min(scene.len().saturating_sub(1)); scene.len()];
    topk_neighbors(&d, &k).expect("clamped neighbor counts")
}

/// Orders `(distance, index)` pairs the way [`topk_neighbors`] does.
pub fn neighbor_order(a: (f64, usize), b: (f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Point3;
    use proptest::prelude::*;

    fn scene(points: &[[f64; 3]]) -> SceneObjects {
        SceneObjects::from_centers(points.iter().copied()).unwrap()
    }

    #[test]
    fn distances_of_a_345_triangle() {
        let d = pairwise_distances(&scene(&[[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]]));
        assert_eq!(d.as_slice(), &[0.0, 5.0, 5.0, 0.0]);
        let single = pairwise_distances(&scene(&[[1.0, 2.0, 3.0]]));
        assert_eq!(single.as_slice(), &[0.0]);
    }

    #[test]
    fn distances_match_per_pair_recomputation() {
        let pts: Vec<[f64; 3]> = (0..10)
            .map(|i| {
                let t = i as f64;
                [(t * 1.3).sin() * 4.0, (t * 0.7).cos() * 3.0, t * 0.25 - 1.0]
            })
            .collect();
        let d = pairwise_distances(&scene(&pts));
        for i in 0..10 {
            for j in 0..10 {
                let p = pts[i];
                let q = pts[j];
                let expect =
                    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
                assert_eq!(d[(i, j)], expect, "({i},{j})");
            }
        }
    }

    #[test]
    fn density_of_collinear_points() {
        // x = 0, 1, 3: mean distances 2, 1.5, 2.5.
        let d = pairwise_distances(&scene(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]));
        let (rho, rho_norm) = local_density(&d);
        assert_eq!(rho, vec![-1.0, -0.5, -1.5]);
        assert_eq!(rho_norm, vec![0.5, 1.0, 0.0]);
    }

    #[test]
    fn degenerate_densities_normalize_to_one() {
        let same = pairwise_distances(&scene(&[[2.0, 2.0, 2.0]; 4]));
        assert_eq!(local_density(&same).1, vec![1.0; 4]);
        let single = pairwise_distances(&scene(&[[0.0, 0.0, 0.0]]));
        assert_eq!(local_density(&single).1, vec![1.0]);
    }

    #[test]
    fn adaptive_k_at_the_bounds() {
        let p = GeoParams::default();
        assert_eq!(adaptive_k(&[1.0], p, 50), vec![10]);
        assert_eq!(adaptive_k(&[0.0], p, 50), vec![2]);
        // round(8 * 0.5 + 2) = 6, clamped to N - 1 = 2.
        assert_eq!(adaptive_k(&[0.5], p, 3), vec![2]);
        // 8 * 0.0625 + 2 = 2.5 rounds away from zero.
        assert_eq!(adaptive_k(&[0.0625], p, 50), vec![3]);
        assert_eq!(adaptive_k(&[1.0], p, 1), vec![0]);
    }

    #[test]
    fn geo_params_reject_inverted_bounds() {
        assert!(GeoParams::new(5, 4).is_err());
        assert!(GeoParams::new(0, 0).is_ok());
    }

    #[test]
    fn topk_trivial_pair() {
        let d = pairwise_distances(&scene(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]));
        let omega = topk_neighbors(&d, &[1, 1]).unwrap();
        assert_eq!(omega.of(0), &[1]);
        assert_eq!(omega.of(1), &[0]);
        let allow = geo_object_mask(&omega);
        assert_eq!(allow.count_true(), 4);
    }

    #[test]
    fn topk_tie_break_prefers_lower_index() {
        // Hand-built distance matrix of an equilateral triangle; exact ties.
        let d = Matrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 1.0 });
        let omega = topk_neighbors(&d, &[1, 1, 1]).unwrap();
        assert_eq!(omega.of(0), &[1]);
        assert_eq!(omega.of(1), &[0]);
        assert_eq!(omega.of(2), &[0]);
    }

    #[test]
    fn topk_rejects_oversized_k() {
        let d = Matrix::zeros(2, 2);
        assert!(topk_neighbors(&d, &[2, 1]).is_err());
        assert!(topk_neighbors(&d, &[1]).is_err());
    }

    #[test]
    fn single_object_mask_is_identity() {
        let geo = GeoMask::build(&scene(&[[0.0, 0.0, 0.0]]), GeoParams::default());
        assert_eq!(geo.allow.as_slice(), &[true]);
        assert_eq!(geo.profile.k, vec![0]);
    }

    #[test]
    fn neighbor_sets_validate() {
        assert!(NeighborSets::new(vec![vec![0]]).is_err());
        assert!(NeighborSets::new(vec![vec![1, 1], vec![0]]).is_err());
        assert!(NeighborSets::new(vec![vec![2], vec![0]]).is_err());
        assert!(NeighborSets::new(vec![vec![1], vec![]]).is_ok());
    }

    fn arb_scene() -> impl Strategy<Value = Vec<[f64; 3]>> {
        proptest::collection::vec(
            (-5.0f64..5.0, -5.0f64..5.0, -2.0f64..2.0).prop_map(|(x, y, z)| [x, y, z]),
            1..24,
        )
    }

    proptest! {
        #[test]
        fn topk_equals_full_sort(points in arb_scene(), kmin in 0usize..4, extra in 0usize..8) {
            let s = scene(&points);
            let params = GeoParams::new(kmin, kmin + extra).unwrap();
            let geo = GeoMask::build(&s, params);
            let d = &geo.profile.pairwise_d;
            for i in 0..s.len() {
                let mut all: Vec<usize> = (0..s.len()).filter(|&j| j != i).collect();
                all.sort_by(|&a, &b| neighbor_order((d[(i, a)], a), (d[(i, b)], b)));
                all.truncate(geo.profile.k[i]);
                prop_assert_eq!(geo.neighbors.of(i), all.as_slice());
            }
        }

        #[test]
        fn profile_invariants(points in arb_scene(), kmin in 0usize..5, extra in 0usize..12) {
            let s = scene(&points);
            let n = s.len();
            let params = GeoParams::new(kmin, kmin + extra).unwrap();
            let geo = GeoMask::build(&s, params);
            let p = &geo.profile;
            for i in 0..n {
                prop_assert_eq!(p.pairwise_d[(i, i)], 0.0);
                for j in 0..n {
                    prop_assert_eq!(p.pairwise_d[(i, j)], p.pairwise_d[(j, i)]);
                }
                prop_assert!((0.0..=1.0).contains(&p.rho_norm[i]));
                let k_lo = kmin.min(n - 1);
                let k_hi = (kmin + extra).min(n - 1);
                prop_assert!(k_lo <= p.k[i] && p.k[i] <= k_hi);
                prop_assert_eq!(geo.neighbors.of(i).len(), p.k[i]);
                prop_assert!(!geo.neighbors.contains(i, i));
                let row_true = geo.allow.row(i).iter().filter(|&&b| b).count();
                prop_assert_eq!(row_true, p.k[i] + 1);
            }
        }

        #[test]
        fn raising_k_max_never_removes_pairs(points in arb_scene(), kmin in 0usize..4, extra in 0usize..6, bump in 1usize..6) {
            let s = scene(&points);
            let small = GeoMask::build(&s, GeoParams::new(kmin, kmin + extra).unwrap());
            let large = GeoMask::build(&s, GeoParams::new(kmin, kmin + extra + bump).unwrap());
            for (a, b) in small.allow.as_slice().iter().zip(large.allow.as_slice()) {
                prop_assert!(!a || *b);
            }
        }
    }

    #[test]
    fn rigid_motion_keeps_normalized_density() {
        let s = scene(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.2, 0.0],
            [3.0, -1.0, 0.5],
            [0.4, 0.9, 2.0],
        ]);
        let moved = s
            .map_centers(|c| Point3::new(-c.y * 2.5 + 7.0, c.x * 2.5 - 3.0, c.z * 2.5 + 1.0))
            .unwrap();
        let a = GeoMask::build(&s, GeoParams::new(1, 2).unwrap());
        let b = GeoMask::build(&moved, GeoParams::new(1, 2).unwrap());
        for (x, y) in a.profile.rho_norm.iter().zip(&b.profile.rho_norm) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(a.allow, b.allow);
    }
}
