//! A desk-scale grounding task.
//!
//! Every cluster holds one landmark object tagged with its cluster id. The
//! instruction names a cluster and a rank `r`; the answer is the identifier
//! token of the `r`-th nearest object to that cluster's landmark, the
//! landmark itself being rank 1. The task is solvable from object geometry
//! and the instruction alone, and object order carries no signal.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{generate_labeled_scene, GeneratedScene, SceneRecipe};
use crate::attention::SequenceBatch;
use crate::error::{Result, SlimError};
use crate::mask::{compose, MaskStrategy};
use crate::matrix::Matrix;
use crate::scene::{SceneObjects, TokenLayout};

const MAX_TASK_ATTEMPTS: u64 = 64;
/// Relative gap below which two candidate distances count as tied.
const AMBIGUITY_GAP: f64 = 1e-9;

/// Random Fourier features per object; their dot products approximate a
/// Gaussian kernel of the distance at the scene's local length scale.
pub const KERNEL_FEATURES: usize = 16;
const KERNEL_SEED: u64 = 0x5EED_F00D;
/// Kernel bandwidth in units of the median nearest-neighbor distance.
const KERNEL_WIDTH: f64 = 1.5;

pub const N_SYSTEM: usize = 2;
pub const N_INSTRUCTION: usize = 3;
pub const N_RESPONSE: usize = 1;

/// Token ids of the grounding task.
///
/// `[SYS0, SYS1, FIND, ANSWER, CLUSTER_0.., RANK_1.., OBJ_0..]`
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroundingVocab {
    pub max_objects: usize,
    pub max_clusters: usize,
    pub max_rank: usize,
}

impl GroundingVocab {
    pub const FIND: usize = 2;
    pub const ANSWER: usize = 3;
    const FIRST_CLUSTER: usize = 4;

    pub fn system(&self, i: usize) -> usize {
        debug_assert!(i < N_SYSTEM);
        i
    }

    pub fn cluster(&self, c: usize) -> usize {
        debug_assert!(c < self.max_clusters);
        Self::FIRST_CLUSTER + c
    }

    /// Token for rank `r` (1-based).
    pub fn rank(&self, r: usize) -> usize {
        debug_assert!(r >= 1 && r <= self.max_rank);
        Self::FIRST_CLUSTER + self.max_clusters + r - 1
    }

    pub fn object(&self, i: usize) -> usize {
        debug_assert!(i < self.max_objects);
        Self::FIRST_CLUSTER + self.max_clusters + self.max_rank + i
    }

    pub fn size(&self) -> usize {
        Self::FIRST_CLUSTER + self.max_clusters + self.max_rank + self.max_objects
    }

    /// Normalized xyz, local kernel features, and a one-hot landmark tag.
    pub fn feature_dim(&self) -> usize {
        3 + KERNEL_FEATURES + self.max_clusters
    }

    /// Longest sequence this vocabulary can describe.
    pub fn max_len(&self) -> usize {
        N_SYSTEM + self.max_objects + N_INSTRUCTION + N_RESPONSE
    }
}

/// "The `rank`-th nearest object to the landmark of `cluster`", counting the
/// landmark as rank 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Descriptor {
    pub cluster: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingTask {
    pub scene: SceneObjects,
    /// Landmark object of each cluster, `None` for clusters that came out
    /// empty.
    pub landmarks: Vec<Option<usize>>,
    pub descriptor: Descriptor,
    /// Index of the referred object in scene order.
    pub target: usize,
    pub layout: TokenLayout,
    pub tokens: Vec<usize>,
    pub features: Matrix<f64>,
    pub vocab: GroundingVocab,
}

impl GroundingTask {
    pub fn target_token(&self) -> usize {
        self.tokens[self.layout.spans().objects[self.target].start]
    }

    /// The decoder input for this task under `strategy`.
    pub fn to_batch(&self, strategy: &MaskStrategy) -> Result<SequenceBatch> {
        Ok(SequenceBatch {
            tokens: self.tokens.clone(),
            features: Some(self.features.clone()),
            layout: self.layout,
            mask: compose(&self.scene, &self.layout, strategy)?,
            targets: vec![self.target_token()],
        })
    }

    /// The same task with object tokens (identifier, features, geometry)
    /// reordered so that new slot `i` holds old object `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let scene = self.scene.permuted(perm)?;
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let obj_start = self.layout.n_system;
        let mut tokens = self.tokens.clone();
        let mut features = self.features.clone();
        for (new, &old) in perm.iter().enumerate() {
            tokens[obj_start + new] = self.tokens[obj_start + old];
            features
                .row_mut(obj_start + new)
                .copy_from_slice(self.features.row(obj_start + old));
        }
        Ok(GroundingTask {
            scene,
            landmarks: self
                .landmarks
                .iter()
                .map(|l| l.map(|i| inverse[i]))
                .collect(),
            descriptor: self.descriptor,
            target: inverse[self.target],
            layout: self.layout,
            tokens,
            features,
            vocab: self.vocab,
        })
    }
}

/// Exhaustive resolution: sort every object by distance to the landmark and
/// take the `rank`-th. `None` when the answer is tied or out of range.
pub fn resolve_descriptor(
    scene: &SceneObjects,
    landmarks: &[Option<usize>],
    descriptor: Descriptor,
) -> Option<usize> {
    let landmark = (*landmarks.get(descriptor.cluster)?)?;
    let origin = scene.center(landmark);
    let mut ranked: Vec<(f64, usize)> = (0..scene.len())
        .map(|i| (scene.center(i).distance(&origin), i))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let pos = descriptor.rank.checked_sub(1)?;
    let (d, answer) = *ranked.get(pos)?;
    let tied = |other: Option<&(f64, usize)>| {
        other.is_some_and(|&(e, _)| (e - d).abs() <= AMBIGUITY_GAP * d.abs().max(e.abs()))
    };
    if tied(pos.checked_sub(1).and_then(|p| ranked.get(p))) || tied(ranked.get(pos + 1)) {
        return None;
    }
    Some(answer)
}

fn scene_features(scene: &SceneObjects) -> Vec<[f64; 3]> {
    let n = scene.len() as f64;
    let mut mean = [0.0; 3];
    for c in scene.centers() {
        for (m, v) in mean.iter_mut().zip(c.to_array()) {
            *m += v / n;
        }
    }
    let centered: Vec<[f64; 3]> = scene
        .centers()
        .map(|c| {
            let a = c.to_array();
            [a[0] - mean[0], a[1] - mean[1], a[2] - mean[2]]
        })
        .collect();
    let scale = centered
        .iter()
        .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
        .fold(0.0, f64::max);
    let scale = if scale > 0.0 { scale } else { 1.0 };
    centered.into_iter().map(|v| v.map(|x| x / scale)).collect()
}

fn median_nearest_distance(scene: &SceneObjects) -> f64 {
    let n = scene.len();
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| scene.center(i).distance(&scene.center(j)))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    nearest.sort_by(f64::total_cmp);
    let m = nearest[n / 2];
    if m.is_finite() && m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Fixed frequencies and phases shared by every task.
fn kernel_basis() -> Vec<([f64; 3], f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(KERNEL_SEED);
    let normal = StandardNormal;
    (0..KERNEL_FEATURES)
        .map(|_| {
            let w = [rng.sample(normal), rng.sample(normal), rng.sample(normal)];
            (w, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect()
}

fn kernel_features(scene: &SceneObjects) -> Vec<[f64; KERNEL_FEATURES]> {
    let scale = 1.0 / (KERNEL_WIDTH * median_nearest_distance(scene));
    let basis = kernel_basis();
    let amp = (2.0 / KERNEL_FEATURES as f64).sqrt();
    scene
        .centers()
        .map(|c| {
            let a = c.to_array();
            let mut out = [0.0; KERNEL_FEATURES];
            for (o, (w, b)) in out.iter_mut().zip(&basis) {
                let t = (w[0] * a[0] + w[1] * a[1] + w[2] * a[2]) * scale + b;
                *o = amp * t.cos();
            }
            out
        })
        .collect()
}

fn try_task(
    generated: &GeneratedScene,
    vocab: GroundingVocab,
    rng: &mut ChaCha8Rng,
) -> Result<Option<GroundingTask>> {
    let scene = &generated.scene;
    let n = scene.len();
    let n_clusters = generated.anchors.len();
    if n > vocab.max_objects || n_clusters > vocab.max_clusters {
        return Err(SlimError::config(format!(
            "scene with {n} objects in {n_clusters} clusters exceeds the vocabulary ({} objects, {} clusters)",
            vocab.max_objects, vocab.max_clusters
        )));
    }
    let landmarks: Vec<Option<usize>> = (0..n_clusters)
        .map(|c| generated.cluster_members(c).choose(rng).copied())
        .collect();
    let eligible: Vec<usize> = (0..n_clusters)
        .filter(|&c| !generated.cluster_members(c).is_empty())
        .collect();
    let Some(&cluster) = eligible.choose(rng) else {
        return Err(SlimError::Generation(
            "grounding needs at least one clustered object".into(),
        ));
    };
    let members = generated.cluster_members(cluster).len();
    let rank = rng.random_range(1..=vocab.max_rank.min(members));
    let descriptor = Descriptor { cluster, rank };
    let Some(target) = resolve_descriptor(scene, &landmarks, descriptor) else {
        return Ok(None);
    };
    if generated.cluster_of[target] != Some(cluster) {
        return Ok(None);
    }

    let layout = TokenLayout::new(N_SYSTEM, n, 1, N_INSTRUCTION, N_RESPONSE)?;
    let mut tokens = vec![vocab.system(0), vocab.system(1)];
    tokens.extend((0..n).map(|i| vocab.object(i)));
    tokens.extend([
        GroundingVocab::FIND,
        vocab.cluster(cluster),
        vocab.rank(rank),
    ]);
    tokens.push(GroundingVocab::ANSWER);

    let mut features = Matrix::zeros(layout.len(), vocab.feature_dim());
    for (i, xyz) in scene_features(scene).into_iter().enumerate() {
        features.row_mut(N_SYSTEM + i)[..3].copy_from_slice(&xyz);
    }
    for (i, k) in kernel_features(scene).into_iter().enumerate() {
        features.row_mut(N_SYSTEM + i)[3..3 + KERNEL_FEATURES].copy_from_slice(&k);
    }
    for (c, landmark) in landmarks.iter().enumerate() {
        if let Some(i) = landmark {
            features[(N_SYSTEM + i, 3 + KERNEL_FEATURES + c)] = 1.0;
        }
    }
    Ok(Some(GroundingTask {
        scene: scene.clone(),
        landmarks,
        descriptor,
        target,
        layout,
        tokens,
        features,
        vocab,
    }))
}

/// Builds a task on `generated`. Ambiguous draws are retried with the next
/// seed.
pub fn generate_grounding_task(
    generated: &GeneratedScene,
    vocab: GroundingVocab,
    seed: u64,
) -> Result<GroundingTask> {
    if generated.scene.len() < 2 {
        return Err(SlimError::Generation(
            "grounding needs at least two objects".into(),
        ));
    }
    for attempt in 0..MAX_TASK_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
        if let Some(task) = try_task(generated, vocab, &mut rng)? {
            return Ok(task);
        }
    }
    Err(SlimError::Generation(format!(
        "no unambiguous descriptor after {MAX_TASK_ATTEMPTS} attempts"
    )))
}

/// Draws a fresh scene from `recipe` and a task on it.
pub fn sample_task(
    recipe: &SceneRecipe,
    vocab: GroundingVocab,
    rng: &mut impl Rng,
) -> Result<GroundingTask> {
    let generated = generate_labeled_scene(&recipe.with_seed(rng.random()))?;
    generate_grounding_task(&generated, vocab, rng.random())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Point3;

    fn vocab() -> GroundingVocab {
        GroundingVocab {
            max_objects: 48,
            max_clusters: 6,
            max_rank: 2,
        }
    }

    #[test]
    fn token_ids_do_not_overlap() {
        let v = vocab();
        let mut ids = vec![
            v.system(0),
            v.system(1),
            GroundingVocab::FIND,
            GroundingVocab::ANSWER,
        ];
        ids.extend((0..v.max_clusters).map(|c| v.cluster(c)));
        ids.extend((1..=v.max_rank).map(|r| v.rank(r)));
        ids.extend((0..v.max_objects).map(|i| v.object(i)));
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), ids.len());
        assert_eq!(*sorted.last().unwrap() + 1, v.size());
    }

    #[test]
    fn nearest_to_landmark_is_resolved() {
        let scene = SceneObjects::from_centers([
            [3.0, 0.0, 0.0],
            [0.0, 0.0, 0.0],
            [0.5, 0.1, 0.0],
            [-1.0, 0.7, 0.0],
        ])
        .unwrap();
        let landmarks = [Some(1)];
        let at = |rank| resolve_descriptor(&scene, &landmarks, Descriptor { cluster: 0, rank });
        assert_eq!(at(1), Some(1));
        assert_eq!(at(2), Some(2));
        assert_eq!(at(3), Some(3));
        assert_eq!(at(4), Some(0));
        assert_eq!(at(5), None);
        assert_eq!(
            resolve_descriptor(
                &scene,
                &landmarks,
                Descriptor {
                    cluster: 1,
                    rank: 1
                }
            ),
            None
        );
    }

    #[test]
    fn tied_answers_are_ambiguous() {
        let scene =
            SceneObjects::from_centers([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
                .unwrap();
        assert_eq!(
            resolve_descriptor(
                &scene,
                &[Some(0)],
                Descriptor {
                    cluster: 0,
                    rank: 1
                }
            ),
            Some(0)
        );
        assert_eq!(
            resolve_descriptor(
                &scene,
                &[Some(0)],
                Descriptor {
                    cluster: 0,
                    rank: 2
                }
            ),
            None
        );
    }

    #[test]
    fn generated_tasks_have_unique_answers() {
        let recipe = SceneRecipe::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let task = sample_task(&recipe, vocab(), &mut rng).unwrap();
            let resolved = resolve_descriptor(&task.scene, &task.landmarks, task.descriptor);
            assert_eq!(resolved, Some(task.target));
            assert_eq!(task.tokens.len(), task.layout.len());
            let landmark = task.landmarks[task.descriptor.cluster].unwrap();
            assert_eq!(landmark == task.target, task.descriptor.rank == 1);
            assert_eq!(
                task.features[(
                    N_SYSTEM + landmark,
                    3 + KERNEL_FEATURES + task.descriptor.cluster
                )],
                1.0
            );
        }
    }

    #[test]
    fn permuting_moves_the_target_with_its_object() {
        let g = generate_labeled_scene(&SceneRecipe::default().with_seed(4)).unwrap();
        let task = generate_grounding_task(&g, vocab(), 9).unwrap();
        let n = task.scene.len();
        let perm: Vec<usize> = (0..n).rev().collect();
        let p = task.permuted(&perm).unwrap();
        assert_eq!(p.target_token(), task.target_token());
        assert_eq!(p.scene.center(p.target), task.scene.center(task.target));
        assert_eq!(
            resolve_descriptor(&p.scene, &p.landmarks, p.descriptor),
            Some(p.target)
        );
    }

    #[test]
    fn two_object_scene_has_one_answer() {
        let g = GeneratedScene {
            scene: SceneObjects::from_centers([
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(0.3, 0.0, 0.0),
            ])
            .unwrap(),
            cluster_of: vec![Some(0), Some(0)],
            anchors: vec![Point3::ORIGIN],
        };
        for seed in 0..8 {
            let task = generate_grounding_task(&g, vocab(), seed).unwrap();
            let landmark = task.landmarks[0].unwrap();
            let expected = if task.descriptor.rank == 1 {
                landmark
            } else {
                1 - landmark
            };
            assert_eq!(task.target, expected);
        }
    }

    #[test]
    fn scenes_too_large_for_the_vocabulary_fail() {
        let small = GroundingVocab {
            max_objects: 4,
            ..vocab()
        };
        let g = generate_labeled_scene(&SceneRecipe::default()).unwrap();
        assert!(matches!(
            generate_grounding_task(&g, small, 0),
            Err(SlimError::Config(_))
        ));
    }
}
