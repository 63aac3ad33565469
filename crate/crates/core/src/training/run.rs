//! Batched optimization loops, evaluation and logging.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SceneRecord;
use crate::graph::Vocab;
use crate::metrics::{reward, RewardSpec};
use crate::model::{
    argmax, assemble_graph, communicate, Checkpoint, ModelParameters, Param, RelationTables,
    SceneRelations,
};

use super::critic::ma_baseline;
use super::objective::{scene_policy_gradient, scene_xe_gradient, GradSample};
use super::{stream_seed, Result, TrainConfig, TrainError};

/// Evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Categories fixed to the truth; only predicates are predicted.
    PredCls,
    /// Categories decoded greedily, then predicates.
    SgCls,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::PredCls => "predcls",
            Task::SgCls => "sgcls",
        })
    }
}

impl FromStr for Task {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "predcls" => Ok(Task::PredCls),
            "sgcls" => Ok(Task::SgCls),
            _ => Err(TrainError::Config(format!("unknown task {s:?}; expected predcls or sgcls"))),
        }
    }
}

/// Scores one scene under each metric.
pub fn evaluate_scene(
    params: &ModelParameters,
    tables: &RelationTables,
    steps: usize,
    record: &SceneRecord,
    task: Task,
    specs: &[RewardSpec],
) -> Result<Vec<f64>> {
    let state = communicate(&record.input(), params, steps)?;
    let (actions, conf): (Vec<usize>, Vec<f64>) = match task {
        Task::PredCls => (record.labels(), vec![1.0; record.num_entities()]),
        Task::SgCls => state
            .probabilities()
            .iter()
            .map(|p| {
                let a = argmax(p);
                (a, p[a])
            })
            .unzip(),
    };
    let pairs = SceneRelations::new(tables, &state).all_pair_probs(&actions);
    let boxes = record.boxes();
    Ok(specs
        .iter()
        .map(|spec| {
            let graph = assemble_graph(&actions, &conf, &pairs, &boxes, spec.constraint);
            reward(&graph, &record.truth, spec)
        })
        .collect())
}

/// Mean of each metric over the scenes of `records` that have at least one
/// annotated relationship; scenes may be scored in parallel but are summed
/// in input order.
pub fn evaluate(
    params: &ModelParameters,
    steps: usize,
    records: &[SceneRecord],
    task: Task,
    specs: &[RewardSpec],
) -> Result<Vec<f64>> {
    let scored: Vec<&SceneRecord> = records.iter().filter(|r| !r.truth.triplets.is_empty()).collect();
    if scored.is_empty() {
        return Err(TrainError::Config("no scenes with relationships to evaluate".into()));
    }
    let tables = RelationTables::new(params);
    let per_scene: Vec<Vec<f64>> = scored
        .par_iter()
        .map(|r| evaluate_scene(params, &tables, steps, r, task, specs))
        .collect::<Result<_>>()?;
    let mut mean = vec![0.0; specs.len()];
    for row in &per_scene {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    Ok(mean.into_iter().map(|m| m / scored.len() as f64).collect())
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: String,
    pub iteration: usize,
    pub loss: f64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub cb_mean: f64,
    pub entropy: f64,
    pub xe: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_recall: Option<f64>,
}

#[derive(Debug, Serialize)]
struct TimingRecord<'a> {
    stage: &'a str,
    iteration: usize,
    seconds: f64,
}

/// Optional sinks for the deterministic metrics log and the wall-clock log.
#[derive(Default)]
pub struct Logger<'a> {
    pub metrics: Option<&'a mut (dyn Write + Send)>,
    pub timing: Option<&'a mut (dyn Write + Send)>,
    pub records: Vec<LogRecord>,
}

impl<'a> Logger<'a> {
    fn log(&mut self, record: LogRecord, seconds: f64) -> Result<()> {
        if let Some(w) = self.metrics.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&record).expect("log record serializes"))?;
        }
        if let Some(w) = self.timing.as_mut() {
            let t = TimingRecord {
                stage: &record.stage,
                iteration: record.iteration,
                seconds,
            };
            writeln!(w, "{}", serde_json::to_string(&t).expect("timing record serializes"))?;
        }
        self.records.push(record);
        Ok(())
    }
}

/// Aggregate diagnostics of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub loss: f64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub cb_mean: f64,
    pub entropy: f64,
    pub xe: f64,
    pub grad_norm: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn non_finite(err: TrainError, scene: u64, iteration: usize) -> TrainError {
    match err {
        TrainError::NonFinite(m) => TrainError::NonFinite(format!("scene {scene}, iteration {iteration}: {m}")),
        other => other,
    }
}

/// Averages per-scene gradients in batch order, clips to `clip_norm` and
/// takes one SGD step. Returns the pre-clip norm of the averaged gradient.
fn apply_update(
    params: &mut ModelParameters,
    grads: &[(u64, Vec<Vec<f64>>)],
    lr: f64,
    clip_norm: f64,
    iteration: usize,
) -> Result<f64> {
    let mut total: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    for (scene, g) in grads {
        for ((t, gp), p) in total.iter_mut().zip(g).zip(Param::ALL) {
            if let Some(k) = gp.iter().position(|v| !v.is_finite()) {
                return Err(TrainError::NonFinite(format!(
                    "gradient of {}[{k}] is {} for scene {scene} at iteration {iteration}",
                    p.name(),
                    gp[k]
                )));
            }
            for (a, b) in t.iter_mut().zip(gp) {
                *a += b;
            }
        }
    }
    let inv = 1.0 / grads.len() as f64;
    let norm = total.iter().flatten().map(|g| (g * inv).powi(2)).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(TrainError::NonFinite(format!("gradient norm {norm} at iteration {iteration}")));
    }
    let factor = if norm > clip_norm { clip_norm / norm } else { 1.0 };
    let step = lr * inv * factor;
    for (t, g) in params.tensors_mut().iter_mut().zip(&total) {
        for (v, d) in t.values_mut().iter_mut().zip(g) {
            *v -= step * d;
        }
    }
    Ok(norm)
}

/// One cross-entropy step on `batch`.
pub fn xe_step(params: &mut ModelParameters, batch: &[&SceneRecord], config: &TrainConfig, iteration: usize) -> Result<StepStats> {
    let steps = config.steps;
    let shared: &ModelParameters = params;
    let results: Vec<(u64, f64, Vec<Vec<f64>>)> = batch
        .par_iter()
        .map(|r| {
            scene_xe_gradient(shared, r, steps)
                .map(|(l, g)| (r.id, l, g))
                .map_err(|e| non_finite(e, r.id, iteration))
        })
        .collect::<Result<_>>()?;
    let loss = results.iter().map(|r| r.1).sum::<f64>() / results.len() as f64;
    let grads: Vec<(u64, Vec<Vec<f64>>)> = results.into_iter().map(|(id, _, g)| (id, g)).collect();
    let grad_norm = apply_update(params, &grads, config.lr_pretrain, config.clip_norm, iteration)?;
    Ok(StepStats {
        loss,
        xe: loss,
        grad_norm,
        ..StepStats::default()
    })
}

/// One stage-2 step. `history` holds past episode rewards for the
/// moving-average baseline and is extended with this batch's rewards.
pub fn policy_gradient_step(
    params: &mut ModelParameters,
    batch: &[&SceneRecord],
    config: &TrainConfig,
    iteration: usize,
    history: &mut Vec<f64>,
) -> Result<StepStats> {
    let ma_value = ma_baseline(history, config.ma_window);
    let shared: &ModelParameters = params;
    let tables = RelationTables::new(shared);
    let samples: Vec<GradSample> = batch
        .par_iter()
        .map(|r| {
            scene_policy_gradient(shared, &tables, r, config, iteration as u64, ma_value)
                .map_err(|e| non_finite(e, r.id, iteration))
        })
        .collect::<Result<_>>()?;
    let rewards: Vec<f64> = samples.iter().map(|s| s.reward).collect();
    let (reward_mean, reward_std) = mean_std(&rewards);
    let cbs: Vec<f64> = samples.iter().flat_map(|s| s.baselines.iter().copied()).collect();
    let b = samples.len() as f64;
    let stats = StepStats {
        loss: samples.iter().map(|s| s.loss).sum::<f64>() / b,
        reward_mean,
        reward_std,
        cb_mean: mean_std(&cbs).0,
        entropy: samples.iter().map(|s| s.entropy).sum::<f64>() / b,
        xe: samples.iter().map(|s| s.xe).sum::<f64>() / b,
        grad_norm: 0.0,
    };
    let grads: Vec<(u64, Vec<Vec<f64>>)> = samples.into_iter().map(|s| (s.scene, s.grads)).collect();
    let grad_norm = apply_update(params, &grads, config.lr_rl, config.clip_norm, iteration)?;
    history.extend(rewards);
    Ok(StepStats { grad_norm, ..stats })
}

/// Epoch-wise shuffled minibatches.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
}

impl Batches {
    fn new(len: usize, seed: u64) -> Self {
        let mut b = Self {
            order: (0..len).collect(),
            pos: 0,
            epoch: 0,
            seed,
        };
        b.shuffle();
        b
    }

    fn shuffle(&mut self) {
        self.order.sort_unstable();
        self.order
            .shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(self.seed, u64::MAX, self.epoch)));
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.pos = 0;
                self.shuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out.sort_unstable();
        out
    }
}

fn pool(config: &TrainConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads.max(1))
        .build()
        .map_err(|e| TrainError::Config(format!("thread pool: {e}")))
}

fn corpus_dims(config: &TrainConfig, vocab: &Vocab, train: &[SceneRecord]) -> Result<crate::model::Dims> {
    let first = train
        .first()
        .ok_or_else(|| TrainError::Config("training set is empty".into()))?;
    config.dims(first.features[0].len(), vocab.num_objects(), vocab.num_predicates())
}

fn validation_spec(config: &TrainConfig) -> RewardSpec {
    RewardSpec::recall(config.reward.k).with_constraint(config.reward.constraint)
}

#[derive(Clone, Copy)]
enum Stage {
    Xe,
    Rl,
}

fn run_stage(
    stage: Stage,
    config: &TrainConfig,
    mut params: ModelParameters,
    train: &[SceneRecord],
    val: &[SceneRecord],
    logger: &mut Logger,
) -> Result<ModelParameters> {
    let (iters, salt, name) = match stage {
        Stage::Xe => (config.pretrain_iters, 1, "xe"),
        Stage::Rl => (config.rl_iters, 2, "rl"),
    };
    let mut batches = Batches::new(train.len(), config.seed ^ salt);
    let mut history = Vec::new();
    let vspec = [validation_spec(config)];
    for it in 0..iters {
        let start = Instant::now();
        let batch: Vec<&SceneRecord> = batches.next(config.batch_size).into_iter().map(|k| &train[k]).collect();
        let stats = match stage {
            Stage::Xe => xe_step(&mut params, &batch, config, it)?,
            Stage::Rl => policy_gradient_step(&mut params, &batch, config, it, &mut history)?,
        };
        let last = it + 1 == iters;
        let due = last || (config.eval_every > 0 && (it + 1) % config.eval_every == 0);
        let val_recall = if due && val.iter().any(|r| !r.truth.triplets.is_empty()) {
            Some(evaluate(&params, config.steps, val, Task::SgCls, &vspec)?[0])
        } else {
            None
        };
        let record = LogRecord {
            stage: name.to_string(),
            iteration: it,
            loss: stats.loss,
            reward_mean: stats.reward_mean,
            reward_std: stats.reward_std,
            cb_mean: stats.cb_mean,
            entropy: stats.entropy,
            xe: stats.xe,
            grad_norm: stats.grad_norm,
            val_recall,
        };
        logger.log(record, start.elapsed().as_secs_f64())?;
    }
    Ok(params)
}

/// Stage 1: fits a freshly initialized network with cross-entropy.
pub fn pretrain(
    config: &TrainConfig,
    vocab: &Vocab,
    train: &[SceneRecord],
    val: &[SceneRecord],
    logger: &mut Logger,
) -> Result<Checkpoint> {
    let dims = corpus_dims(config, vocab, train)?;
    let params = ModelParameters::init(dims, config.seed);
    let params = pool(config)?.install(|| run_stage(Stage::Xe, config, params, train, val, logger))?;
    Ok(Checkpoint {
        params,
        steps: config.steps,
    })
}

/// Stage 2: policy-gradient fine-tuning from a stage-1 checkpoint.
pub fn train_rl(
    config: &TrainConfig,
    vocab: &Vocab,
    init: Option<&Checkpoint>,
    train: &[SceneRecord],
    val: &[SceneRecord],
    logger: &mut Logger,
) -> Result<Checkpoint> {
    let init = init.ok_or(TrainError::MissingCheckpoint)?;
    let dims = corpus_dims(config, vocab, train)?;
    let found = init.params.dims();
    if (found.feature, found.num_classes, found.num_predicates) != (dims.feature, dims.num_classes, dims.num_predicates) {
        return Err(TrainError::Config(format!(
            "checkpoint sizes {found:?} do not fit the corpus {dims:?}"
        )));
    }
    if init.steps != config.steps {
        return Err(TrainError::Config(format!(
            "checkpoint was trained with {} communication steps, config asks for {}",
            init.steps, config.steps
        )));
    }
    let params = pool(config)?.install(|| run_stage(Stage::Rl, config, init.params.clone(), train, val, logger))?;
    Ok(Checkpoint {
        params,
        steps: config.steps,
    })
}

/// Both stages; returns the stage-1 and stage-2 checkpoints.
pub fn train(
    config: &TrainConfig,
    vocab: &Vocab,
    train: &[SceneRecord],
    val: &[SceneRecord],
    logger: &mut Logger,
) -> Result<(Checkpoint, Checkpoint)> {
    let xe = pretrain(config, vocab, train, val, logger)?;
    let rl = train_rl(config, vocab, Some(&xe), train, val, logger)?;
    Ok((xe, rl))
}
