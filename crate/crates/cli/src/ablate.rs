//! Ablation sweeps over the stage-2 baseline, the reward, or the number of
//! communication rounds, repeated over several seeds.

use std::fmt;
use std::str::FromStr;

use clap::ValueEnum;
use cmat::data::SceneRecord;
use cmat::graph::Vocab;
use cmat::metrics::RewardSpec;
use cmat::model::Checkpoint;
use cmat::training::{evaluate, pretrain, train_rl, Baseline, Logger, Task, TrainConfig};
use serde::Serialize;

use crate::error::{CliError, Result};

pub const STEP_GRID: [usize; 4] = [2, 3, 4, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Baseline,
    Reward,
    Steps,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Baseline => "baseline",
            Axis::Reward => "reward",
            Axis::Steps => "steps",
        })
    }
}

impl FromStr for Axis {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        <Axis as ValueEnum>::from_str(s, true).map_err(|_| CliError::Usage(format!("unknown axis {s:?}")))
    }
}

/// Validation scores of one trained checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scores {
    pub recall: f64,
    pub spice: f64,
}

/// Greedy scene-graph classification on `val` under recall@K and spice@K.
pub fn score(ckpt: &Checkpoint, val: &[SceneRecord], k: usize) -> Result<Scores> {
    let m = evaluate(&ckpt.params, ckpt.steps, val, Task::SgCls, &[RewardSpec::recall(k), RewardSpec::spice(k)])?;
    Ok(Scores {
        recall: m[0],
        spice: m[1],
    })
}

pub struct Sweep<'a> {
    pub vocab: &'a Vocab,
    pub train: &'a [SceneRecord],
    pub val: &'a [SceneRecord],
}

impl Sweep<'_> {
    pub fn pretrain(&self, config: &TrainConfig) -> Result<Checkpoint> {
        Ok(pretrain(config, self.vocab, self.train, &[], &mut Logger::default())?)
    }

    pub fn fine_tune(&self, config: &TrainConfig, init: &Checkpoint) -> Result<Checkpoint> {
        Ok(train_rl(config, self.vocab, Some(init), self.train, &[], &mut Logger::default())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub axis: Axis,
    pub cell: String,
    pub seed: u64,
    pub recall: f64,
    pub spice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub name: String,
    pub recall: Vec<f64>,
    pub spice: Vec<f64>,
}

/// Sample mean, sample standard deviation and standard error.
pub fn summarize(xs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt(), (var / n).sqrt())
}

/// Standard error of the difference of two independent sample means.
pub fn pooled_se(a: &[f64], b: &[f64]) -> f64 {
    let (_, _, sa) = summarize(a);
    let (_, _, sb) = summarize(b);
    (sa * sa + sb * sb).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub axis: Axis,
    pub k: usize,
    pub cells: Vec<Cell>,
}

impl AblationTable {
    pub fn cell(&self, name: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.name == name)
    }

    pub fn render(&self) -> String {
        let seeds = self.cells.first().map_or(0, |c| c.recall.len());
        let mut out = format!(
            "axis {}  (validation, sgcls, {seeds} seeds, mean ± std)\n{:<12} {:>20} {:>20}\n",
            self.axis,
            "cell",
            format!("recall@{}", self.k),
            format!("spice@{}", self.k)
        );
        for c in &self.cells {
            let (rm, rs, _) = summarize(&c.recall);
            let (sm, ss, _) = summarize(&c.spice);
            out += &format!("{:<12} {:>11.4} ± {:<6.4} {:>11.4} ± {:<6.4}\n", c.name, rm, rs, sm, ss);
        }
        out
    }
}

fn push(cells: &mut Vec<Cell>, name: &str, s: Scores) {
    match cells.iter_mut().find(|c| c.name == name) {
        Some(c) => {
            c.recall.push(s.recall);
            c.spice.push(s.spice);
        }
        None => cells.push(Cell {
            name: name.to_string(),
            recall: vec![s.recall],
            spice: vec![s.spice],
        }),
    }
}

/// Runs every cell of `axis` for seeds `config.seed .. config.seed + seeds`.
/// Cells are: `xe` plus each baseline; `xe` plus a recall and a spice reward
/// (with the configured baseline); or `T=2 .. T=5`, each pretrained and
/// fine-tuned at that depth.
pub fn run_ablation(
    config: &TrainConfig,
    sweep: &Sweep,
    axis: Axis,
    seeds: usize,
    mut on_run: impl FnMut(&RunRecord),
) -> Result<AblationTable> {
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let k = config.reward.k;
    let mut cells = Vec::new();
    for s in 0..seeds as u64 {
        let seeded = TrainConfig {
            seed: config.seed + s,
            ..config.clone()
        };
        let mut record = |cells: &mut Vec<Cell>, name: &str, ckpt: &Checkpoint| -> Result<()> {
            let sc = score(ckpt, sweep.val, k)?;
            push(cells, name, sc);
            on_run(&RunRecord {
                axis,
                cell: name.to_string(),
                seed: seeded.seed,
                recall: sc.recall,
                spice: sc.spice,
            });
            Ok(())
        };
        match axis {
            Axis::Baseline => {
                let xe = sweep.pretrain(&seeded)?;
                record(&mut cells, "xe", &xe)?;
                for b in Baseline::ALL {
                    let cfg = TrainConfig {
                        baseline: b,
                        ..seeded.clone()
                    };
                    record(&mut cells, b.name(), &sweep.fine_tune(&cfg, &xe)?)?;
                }
            }
            Axis::Reward => {
                let xe = sweep.pretrain(&seeded)?;
                record(&mut cells, "xe", &xe)?;
                for reward in [RewardSpec::recall(k), RewardSpec::spice(k)] {
                    let cfg = TrainConfig {
                        reward: reward.with_constraint(config.reward.constraint),
                        ..seeded.clone()
                    };
                    record(&mut cells, &reward.to_string(), &sweep.fine_tune(&cfg, &xe)?)?;
                }
            }
            Axis::Steps => {
                for t in STEP_GRID {
                    let cfg = TrainConfig {
                        steps: t,
                        ..seeded.clone()
                    };
                    let xe = sweep.pretrain(&cfg)?;
                    record(&mut cells, &format!("T={t}"), &sweep.fine_tune(&cfg, &xe)?)?;
                }
            }
        }
    }
    Ok(AblationTable { axis, k, cells })
}
