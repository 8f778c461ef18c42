//! Reference mask construction by direct entrywise rule evaluation.
//!
//! Written against the mask definitions only: scalar loops, a full selection
//! sort for nearest neighbors, and a per-entry decision for every `(p, q)`.
//! It shares no code with `geo` or `mask` beyond the data types, so the
//! equality tests between the two are meaningful.

use crate::error::Result;
use crate::geo::GeoParams;
use crate::mask::{AttentionMask, MaskStrategy, MaskVariant};
use crate::matrix::Matrix;
use crate::scene::{SceneObjects, TokenLayout};

fn distance(scene: &SceneObjects, i: usize, j: usize) -> f64 {
    let a = scene.objects()[i].center;
    let b = scene.objects()[j].center;
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Neighbor counts from the density rule.
fn oracle_counts(scene: &SceneObjects, k_min: usize, k_max: usize) -> Vec<usize> {
    let n = scene.len();
    if n == 1 {
        return vec![0];
    }
    let mut rho = vec![0.0; n];
    for (i, r) in rho.iter_mut().enumerate() {
        let mut total = 0.0;
        for j in 0..n {
            if j != i {
                total += distance(scene, i, j);
            }
        }
        *r = 1.0 - total / (n - 1) as f64;
    }
    let mut lo = rho[0];
    let mut hi = rho[0];
    for &r in &rho {
        if r < lo {
            lo = r;
        }
        if r > hi {
            hi = r;
        }
    }
    let mut counts = Vec::with_capacity(n);
    for &r in &rho {
        let normalized = if hi > lo { (r - lo) / (hi - lo) } else { 1.0 };
        let raw = (k_max as f64 - k_min as f64) * normalized + k_min as f64;
        // raw >= 0, so floor(raw + 0.5) is round-half-away-from-zero.
        let mut k = (raw + 0.5).floor() as usize;
        if k > n - 1 {
            k = n - 1;
        }
        counts.push(k);
    }
    counts
}

/// Selection sort on `(distance, index)`; returns the first `k` picks.
fn oracle_nearest(scene: &SceneObjects, i: usize, k: usize) -> Vec<usize> {
    let n = scene.len();
    let mut taken = vec![false; n];
    taken[i] = true;
    let mut picks = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<(f64, usize)> = None;
        for j in 0..n {
            if taken[j] {
                continue;
            }
            let d = distance(scene, i, j);
            let better = match best {
                None => true,
                Some((bd, bj)) => d < bd || (d == bd && j < bj),
            };
            if better {
                best = Some((d, j));
            }
        }
        let (_, j) = best.expect("k never exceeds n - 1");
        taken[j] = true;
        picks.push(j);
    }
    picks
}

/// Object-level allow relation for every strategy, `None` meaning "leave the
/// causal entries alone".
fn oracle_object_relation(scene: &SceneObjects, variant: MaskVariant) -> Option<Vec<Vec<bool>>> {
    let n = scene.len();
    let neighborhoods: Vec<Vec<usize>> = match variant {
        MaskVariant::Causal | MaskVariant::FullAll => return None,
        MaskVariant::FullObjectBlock => (0..n)
            .map(|i| (0..n).filter(|&j| j != i).collect())
            .collect(),
        MaskVariant::DiagonalObjectBlock => vec![Vec::new(); n],
        MaskVariant::FixedN(k) => {
            let k = if k > n - 1 { n - 1 } else { k };
            (0..n).map(|i| oracle_nearest(scene, i, k)).collect()
        }
        MaskVariant::Geo(params) => {
            let counts = oracle_counts(scene, params.k_min(), params.k_max());
            (0..n)
                .map(|i| oracle_nearest(scene, i, counts[i]))
                .collect()
        }
    };
    let mut relation = vec![vec![false; n]; n];
    for i in 0..n {
        relation[i][i] = true;
        for &j in &neighborhoods[i] {
            relation[i][j] = true;
        }
    }
    Some(relation)
}

/// Reference mask for any strategy.
pub fn oracle_mask(
    scene: &SceneObjects,
    layout: &TokenLayout,
    strategy: &MaskStrategy,
) -> Result<AttentionMask> {
    let n = layout.len();
    let sys_end = layout.n_system;
    let obj_end = sys_end + layout.n_objects * layout.tokens_per_object;
    let inst_end = obj_end + layout.n_instruction;
    let object_of = |p: usize| {
        if p >= sys_end && p < obj_end {
            Some((p - sys_end) / layout.tokens_per_object)
        } else {
            None
        }
    };
    let relation = if layout.n_objects > 0 {
        layout.check_scene(scene)?;
        oracle_object_relation(scene, strategy.variant)
    } else {
        None
    };

    let mut allow = Matrix::filled(n, n, false);
    for p in 0..n {
        for q in 0..n {
            let value = if strategy.variant == MaskVariant::FullAll {
                true
            } else if strategy.inst_mask && object_of(p).is_some() && q >= obj_end && q < inst_end {
                true
            } else if let (Some(i), Some(j), Some(rel)) =
                (object_of(p), object_of(q), relation.as_ref())
            {
                rel[i][j]
            } else {
                q <= p
            };
            allow[(p, q)] = value;
        }
    }
    AttentionMask::from_allow(allow, Some(*layout))
}

/// Reference geometry-adaptive mask, optionally with the instruction override.
pub fn oracle_geo_mask(
    scene: &SceneObjects,
    layout: &TokenLayout,
    params: GeoParams,
    inst_mask: bool,
) -> Result<AttentionMask> {
    oracle_mask(scene, layout, &MaskStrategy::geo(params, inst_mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::compose;
    use crate::scenegen::{generate_scene, SceneRecipe};

    #[test]
    fn single_object_block_is_diagonal() {
        let scene = SceneObjects::from_centers([[1.0, 2.0, 3.0]]).unwrap();
        let layout = TokenLayout::new(1, 1, 1, 1, 0).unwrap();
        let m = oracle_geo_mask(&scene, &layout, GeoParams::default(), false).unwrap();
        assert!(m.allows(1, 1));
        assert_eq!(
            m.allow(),
            compose(
                &scene,
                &layout,
                &MaskStrategy::geo(GeoParams::default(), false)
            )
            .unwrap()
            .allow()
        );
    }

    #[test]
    fn zero_bounds_reduce_to_diagonal_strategy() {
        let scene = generate_scene(&SceneRecipe::default().with_seed(3)).unwrap();
        let layout = TokenLayout::new(2, scene.len(), 1, 3, 1).unwrap();
        let geo = oracle_geo_mask(&scene, &layout, GeoParams::new(0, 0).unwrap(), false).unwrap();
        let diag = oracle_mask(&scene, &layout, &"diag".parse().unwrap()).unwrap();
        assert_eq!(geo, diag);
        let obj = layout.spans().object_segment();
        for p in obj.clone() {
            for q in obj.clone() {
                assert_eq!(geo.allows(p, q), p == q);
            }
        }
    }

    #[test]
    fn fixed_n_matches_fast_path() {
        let scene = generate_scene(&SceneRecipe::default().with_seed(8)).unwrap();
        let layout = TokenLayout::new(2, scene.len(), 2, 3, 1).unwrap();
        let strategy: MaskStrategy = "fixedn:5+inst".parse().unwrap();
        assert_eq!(
            oracle_mask(&scene, &layout, &strategy).unwrap(),
            compose(&scene, &layout, &strategy).unwrap()
        );
    }
}
