//! Two-stage optimization: cross-entropy pretraining, then a multi-agent
//! policy gradient whose per-agent baseline marginalizes that agent's action.

mod critic;
mod objective;
mod run;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::metrics::RewardSpec;
use crate::model::{Dims, ModelError};

pub use critic::{
    advantage, candidate_set, counterfactual_baseline, ma_baseline, sc_baseline, scene_counterfactual_baselines,
    EpisodeScorer,
};
pub use objective::{
    expected_baseline_contribution, policy_objective_gradient, scene_policy_gradient, scene_xe_gradient, xe_terms,
    GradSample, LemmaReport, PolicyTerms,
};
pub use run::{
    evaluate, evaluate_scene, policy_gradient_step, pretrain, train, train_rl, xe_step, Logger, LogRecord, StepStats,
    Task,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite values: {0}")]
    NonFinite(String),
    #[error("stage 2 needs a pretrained checkpoint")]
    MissingCheckpoint,
    #[error("enumeration refused: {0}")]
    Enumeration(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        match e {
            AutodiffError::NonFinite | AutodiffError::NonFiniteLoss(_) => TrainError::NonFinite(e.to_string()),
            other => TrainError::Model(ModelError::Autodiff(other)),
        }
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// Counterfactual: marginalize the agent's own action.
    Cf,
    /// Self-critical: reward of the greedy decode.
    Sc,
    /// Moving average of recent rewards.
    Ma,
    /// Plain REINFORCE.
    None,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [Baseline::None, Baseline::Ma, Baseline::Sc, Baseline::Cf];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Cf => "cf",
            Baseline::Sc => "sc",
            Baseline::Ma => "ma",
            Baseline::None => "none",
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Baseline {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cf" => Ok(Baseline::Cf),
            "sc" => Ok(Baseline::Sc),
            "ma" => Ok(Baseline::Ma),
            "none" => Ok(Baseline::None),
            _ => Err(TrainError::Config(format!(
                "unknown baseline {s:?}; expected cf, sc, ma or none"
            ))),
        }
    }
}

mod reward_text {
    use super::RewardSpec;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(spec: &RewardSpec, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(spec)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<RewardSpec, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(D::Error::custom)
    }
}

/// Every knob of both training stages. Field names double as the config
/// file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: usize,
    pub embed: usize,
    pub relation: usize,
    /// Communication rounds.
    pub steps: usize,
    /// Weight of the cross-entropy term during stage 2.
    pub alpha: f64,
    pub entropy_coeff: f64,
    pub baseline: Baseline,
    /// Candidates per agent for the counterfactual baseline; 0 sums over
    /// every category.
    pub cb_budget: usize,
    #[serde(with = "reward_text")]
    pub reward: RewardSpec,
    pub lr_pretrain: f64,
    pub lr_rl: f64,
    pub batch_size: usize,
    pub pretrain_iters: usize,
    pub rl_iters: usize,
    pub seed: u64,
    pub ma_window: usize,
    pub clip_norm: f64,
    /// Validation interval in iterations; 0 evaluates only at the end.
    pub eval_every: usize,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            embed: 8,
            relation: 8,
            steps: 2,
            alpha: 1.0,
            entropy_coeff: 0.01,
            baseline: Baseline::Cf,
            cb_budget: 0,
            reward: RewardSpec::recall(20),
            lr_pretrain: 0.05,
            lr_rl: 0.05,
            batch_size: 16,
            pretrain_iters: 1000,
            rl_iters: 400,
            seed: 1,
            ma_window: 64,
            clip_norm: 5.0,
            eval_every: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.hidden == 0 || self.embed == 0 || self.relation == 0 {
            return bad("hidden, embed and relation sizes must be positive".into());
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if !(self.entropy_coeff >= 0.0) || !self.entropy_coeff.is_finite() {
            return bad(format!("entropy_coeff must be non-negative, got {}", self.entropy_coeff));
        }
        for (name, lr) in [("lr_pretrain", self.lr_pretrain), ("lr_rl", self.lr_rl)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.ma_window == 0 {
            return bad("ma_window must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        Ok(())
    }

    /// Network sizes for a corpus with the given feature width and vocab.
    pub fn dims(&self, feature: usize, num_classes: usize, num_predicates: usize) -> Result<Dims> {
        self.check()?;
        if self.cb_budget > num_classes {
            return Err(TrainError::Config(format!(
                "cb_budget {} exceeds the {num_classes} object categories",
                self.cb_budget
            )));
        }
        Ok(Dims {
            hidden: self.hidden,
            feature,
            embed: self.embed,
            relation: self.relation,
            num_classes,
            num_predicates,
        })
    }
}

/// Seed for one (scene, iteration) draw, independent of batch order and
/// thread count.
pub(crate) fn stream_seed(seed: u64, scene: u64, iteration: u64) -> u64 {
    let mut x = seed ^ 0x243F_6A88_85A3_08D3;
    for v in [scene, iteration] {
        x = x.wrapping_add(v).wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}
