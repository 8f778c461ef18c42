//! Helpers shared by the integration tests.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slim3d::attention::model::{decoder_forward, DecoderParams, PositionMode};
use slim3d::attention::train::{sample_tasks, TrainConfig};
use slim3d::geo::GeoParams;
use slim3d::mask::MaskStrategy;
use slim3d::scenegen::is_tie_free;

/// Largest deviation from equivariance when the objects of a grounding
/// task are shuffled: response logits must not move and object rows must
/// follow their objects.
pub fn equivariance_gap(spec: &str, mode: PositionMode, seed: u64) -> f64 {
    let mut train = TrainConfig::grounding_default();
    train.model.position_mode = mode;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = DecoderParams::init(&train.model, &mut rng).unwrap();
    let strategy = MaskStrategy::parse(spec, GeoParams::default()).unwrap();
    let task = loop {
        let t = sample_tasks(&train, 1, &mut rng).unwrap().remove(0);
        if t.scene.len() >= 3 && is_tie_free(&t.scene, 1e-9) {
            break t;
        }
    };
    let mut perm: Vec<usize> = (0..task.scene.len()).collect();
    while perm.iter().enumerate().all(|(i, &p)| i == p) {
        perm.shuffle(&mut rng);
    }
    let shuffled = task.permuted(&perm).unwrap();
    let a = decoder_forward(&params, &task.to_batch(&strategy).unwrap()).unwrap();
    let b = decoder_forward(&params, &shuffled.to_batch(&strategy).unwrap()).unwrap();

    let spans = task.layout.spans();
    let mut gap: f64 = 0.0;
    let mut compare = |pa: usize, pb: usize| {
        for (x, y) in a.row(pa).iter().zip(b.row(pb)) {
            gap = gap.max((x - y).abs());
        }
    };
    for p in spans.response.clone() {
        compare(p, p);
    }
    for (new, &old) in perm.iter().enumerate() {
        compare(spans.objects[old].start, spans.objects[new].start);
    }
    gap
}
