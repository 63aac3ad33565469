//! Training configuration: a flat TOML file whose keys are the fields of
//! [`TrainConfig`], overridden by command-line flags.

use std::path::Path;

use clap::Args;
use cmat::metrics::RewardSpec;
use cmat::training::{Baseline, TrainConfig};

use crate::error::{CliError, Result};

pub fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    parse_config(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

pub fn parse_config(text: &str) -> std::result::Result<TrainConfig, String> {
    let cfg: TrainConfig = toml::from_str(text).map_err(|e| e.to_string())?;
    cfg.check().map_err(|e| e.to_string())?;
    Ok(cfg)
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Communication rounds.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub entropy_coeff: Option<f64>,
    #[arg(long)]
    pub lr_pretrain: Option<f64>,
    #[arg(long)]
    pub lr_rl: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub pretrain_iters: Option<usize>,
    #[arg(long)]
    pub rl_iters: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { cfg.$f = v; })*};
        }
        set!(
            seed,
            steps,
            hidden,
            alpha,
            entropy_coeff,
            lr_pretrain,
            lr_rl,
            batch_size,
            pretrain_iters,
            rl_iters,
            eval_every,
            threads
        );
    }
}

/// Stage-2 specific flags.
#[derive(Debug, Clone, Default, Args)]
pub struct RlOverrides {
    #[arg(long, value_parser = parse_baseline)]
    pub baseline: Option<Baseline>,
    /// recall@K or spice@K.
    #[arg(long, value_parser = parse_reward)]
    pub reward: Option<RewardSpec>,
    /// Candidate categories per agent for the counterfactual baseline
    /// (0 = all).
    #[arg(long)]
    pub cb_budget: Option<usize>,
}

impl RlOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(b) = self.baseline {
            cfg.baseline = b;
        }
        if let Some(r) = self.reward {
            cfg.reward = r;
        }
        if let Some(k) = self.cb_budget {
            cfg.cb_budget = k;
        }
    }
}

pub fn parse_baseline(s: &str) -> std::result::Result<Baseline, String> {
    s.parse().map_err(|e: cmat::training::TrainError| e.to_string())
}

pub fn parse_reward(s: &str) -> std::result::Result<RewardSpec, String> {
    s.parse().map_err(|e: cmat::metrics::MetricError| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), TrainConfig::default());
    }

    #[test]
    fn keys_and_reward_text_parse() {
        let cfg = parse_config("steps = 4\nbaseline = \"sc\"\nreward = \"spice@10\"\nalpha = 0.5\n").unwrap();
        assert_eq!(cfg.steps, 4);
        assert_eq!(cfg.baseline, Baseline::Sc);
        assert_eq!(cfg.reward, RewardSpec::spice(10));
        assert_eq!(cfg.alpha, 0.5);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(parse_config("stepz = 4\n").is_err());
        assert!(parse_config("alpha = -1.0\n").is_err());
        assert!(parse_config("reward = \"precision@5\"\n").is_err());
    }

    #[test]
    fn flags_override_file_values() {
        let mut cfg = parse_config("seed = 3\nsteps = 4\n").unwrap();
        Overrides {
            seed: Some(9),
            ..Overrides::default()
        }
        .apply(&mut cfg);
        assert_eq!((cfg.seed, cfg.steps), (9, 4));
    }
}
