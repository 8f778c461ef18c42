//! Gradient-descent training of the decoder on the synthetic grounding task.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::loss::Reduction;
use super::model::{
    decoder_forward, loss_and_gradients, DecoderConfig, DecoderParams, PositionMode, SequenceBatch,
};
use crate::error::{Result, SlimError};
use crate::mask::MaskStrategy;
use crate::scenegen::grounding::{sample_task, GroundingTask, GroundingVocab};
use crate::scenegen::SceneRecipe;

pub const DEFAULT_LEARNING_RATE: f64 = 1e-2;
/// Step size of the ablation budget; at the default rate the runs stay on
/// the initial plateau for the whole budget.
pub const ABLATION_LEARNING_RATE: f64 = 0.1;
pub const ABLATION_STEPS: usize = 1500;

// Independent streams derived from the run seed.
const INIT_STREAM: u64 = 0x1;
const TRAIN_STREAM: u64 = 0x2;
const EVAL_STREAM: u64 = 0x3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub recipe: SceneRecipe,
    pub vocab: GroundingVocab,
    pub model: DecoderConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eval_tasks: usize,
    /// Evaluate every this many steps (and always at the end).
    pub eval_every: usize,
    pub reduction: Reduction,
}

impl TrainConfig {
    /// The two-layer model and task used by the ablation.
    pub fn grounding_default() -> Self {
        let recipe = SceneRecipe {
            n_clusters: 2,
            objects_per_cluster: (2, 4),
            outlier_count: 2,
            ..SceneRecipe::default()
        };
        let vocab = GroundingVocab {
            max_objects: recipe.n_clusters * recipe.objects_per_cluster.1 + recipe.outlier_count,
            max_clusters: recipe.n_clusters,
            max_rank: 2,
        };
        let model = DecoderConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            d_head: 16,
            d_ff: 64,
            vocab_size: vocab.size(),
            max_positions: vocab.max_len(),
            feature_dim: vocab.feature_dim(),
            position_mode: PositionMode::SharedObject,
        };
        TrainConfig {
            recipe,
            vocab,
            model,
            steps: ABLATION_STEPS,
            batch_size: 32,
            learning_rate: ABLATION_LEARNING_RATE,
            eval_tasks: 256,
            eval_every: 100,
            reduction: Reduction::Mean,
        }
    }

    /// Resizes the vocabulary and the model's input and output widths to the
    /// largest scene `recipe` can produce.
    pub fn fit_vocab(&mut self) {
        self.vocab.max_objects =
            self.recipe.n_clusters * self.recipe.objects_per_cluster.1 + self.recipe.outlier_count;
        self.vocab.max_clusters = self.recipe.n_clusters;
        self.model.vocab_size = self.vocab.size();
        self.model.max_positions = self.vocab.max_len();
        self.model.feature_dim = self.vocab.feature_dim();
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.recipe.validate()?;
        if self.model.vocab_size < self.vocab.size()
            || self.model.feature_dim != self.vocab.feature_dim()
            || self.model.max_positions < self.vocab.max_len()
        {
            return Err(SlimError::config(
                "model config does not fit the task vocabulary",
            ));
        }
        if self.batch_size == 0 || self.eval_tasks == 0 || self.eval_every == 0 {
            return Err(SlimError::config(
                "batch_size, eval_tasks and eval_every must be positive",
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SlimError::config("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean NLL on the evaluation tasks.
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainMetrics {
    pub strategy: String,
    pub seed: u64,
    pub steps: usize,
    pub curve: Vec<CurvePoint>,
}

impl TrainMetrics {
    pub fn final_point(&self) -> CurvePoint {
        *self
            .curve
            .last()
            .expect("curve always has the initial point")
    }

    pub fn final_accuracy(&self) -> f64 {
        self.final_point().accuracy
    }

    /// `step,loss,accuracy` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,accuracy\n");
        for p in &self.curve {
            writeln!(out, "{},{:.10},{:.6}", p.step, p.loss, p.accuracy).unwrap();
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "strategy={}, seed={}, accuracy={:.6}, steps={}",
            self.strategy,
            self.seed,
            self.final_accuracy(),
            self.steps
        )
    }
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream)
}

pub fn sample_tasks(
    config: &TrainConfig,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<GroundingTask>> {
    (0..count)
        .map(|_| sample_task(&config.recipe, config.vocab, rng))
        .collect()
}

/// Index of the highest-scoring scene object at the first response position;
/// ties go to the lower index.
pub fn predict(
    params: &DecoderParams,
    task: &GroundingTask,
    batch: &SequenceBatch,
) -> Result<usize> {
    let logits = decoder_forward(params, batch)?;
    let row = logits.row(task.layout.spans().response.start);
    let obj = task.layout.spans().object_segment();
    let mut best = 0;
    for i in 1..task.scene.len() {
        if row[batch.tokens[obj.start + i]] > row[batch.tokens[obj.start + best]] {
            best = i;
        }
    }
    Ok(best)
}

/// Mean loss and accuracy on `tasks`.
pub fn evaluate(
    params: &DecoderParams,
    tasks: &[GroundingTask],
    strategy: &MaskStrategy,
    reduction: Reduction,
) -> Result<(f64, f64)> {
    let results: Vec<Result<(f64, bool)>> = tasks
        .par_iter()
        .map(|task| {
            let batch = task.to_batch(strategy)?;
            let loss = super::model::loss(params, &batch, reduction)?;
            Ok((loss, predict(params, task, &batch)? == task.target))
        })
        .collect();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for r in results {
        let (l, ok) = r?;
        loss += l;
        correct += usize::from(ok);
    }
    Ok((
        loss / tasks.len() as f64,
        correct as f64 / tasks.len() as f64,
    ))
}

/// Trains a fresh decoder under `strategy`. Initialization, training tasks
/// and evaluation tasks depend only on `seed`, so different strategies with
/// the same seed see identical data.
pub fn toy_train(config: &TrainConfig, strategy: &MaskStrategy, seed: u64) -> Result<TrainMetrics> {
    config.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, INIT_STREAM));
    let mut train_rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, TRAIN_STREAM));
    let mut eval_rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, EVAL_STREAM));

    let mut params = DecoderParams::init(&config.model, &mut init_rng)?;
    let eval_set = sample_tasks(config, config.eval_tasks, &mut eval_rng)?;
    let mut curve = Vec::new();
    let (loss, accuracy) = evaluate(&params, &eval_set, strategy, config.reduction)?;
    curve.push(CurvePoint {
        step: 0,
        loss,
        accuracy,
    });

    for step in 1..=config.steps {
        let tasks = sample_tasks(config, config.batch_size, &mut train_rng)?;
        let results: Vec<Result<(f64, DecoderParams)>> = tasks
            .par_iter()
            .map(|task| loss_and_gradients(&params, &task.to_batch(strategy)?, config.reduction))
            .collect();
        let mut grads = params.zeros_like();
        let mut batch_loss = 0.0;
        let scale = 1.0 / tasks.len() as f64;
        for r in results {
            let (l, g) = r?;
            batch_loss += l * scale;
            grads.axpy(scale, &g);
        }
        if !batch_loss.is_finite() {
            return Err(SlimError::Diverged {
                step,
                loss: batch_loss,
            });
        }
        params.axpy(-config.learning_rate, &grads);
        if !params.is_finite() {
            return Err(SlimError::Diverged {
                step,
                loss: f64::NAN,
            });
        }
        if step % config.eval_every == 0 || step == config.steps {
            let (loss, accuracy) = evaluate(&params, &eval_set, strategy, config.reduction)?;
            if !loss.is_finite() {
                return Err(SlimError::Diverged { step, loss });
            }
            curve.push(CurvePoint {
                step,
                loss,
                accuracy,
            });
        }
    }
    Ok(TrainMetrics {
        strategy: strategy.label(),
        seed,
        steps: config.steps,
        curve,
    })
}
