//! Graph-level rewards: Recall@K and an exact-match triplet F-score.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{match_triplets, rank_triplets, top_k, SceneGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    Recall,
    Spice,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub kind: RewardKind,
    pub k: usize,
    pub constraint: bool,
    pub iou_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("unknown metric {0:?}; expected recall@K or spice@K")]
    UnknownMetric(String),
    #[error("metric cutoff must be a positive integer, got {0:?}")]
    BadCutoff(String),
}

impl RewardSpec {
    pub fn recall(k: usize) -> Self {
        Self {
            kind: RewardKind::Recall,
            k,
            constraint: true,
            iou_threshold: 0.5,
        }
    }

    pub fn spice(k: usize) -> Self {
        Self {
            kind: RewardKind::Spice,
            ..Self::recall(k)
        }
    }

    pub fn with_constraint(mut self, constraint: bool) -> Self {
        self.constraint = constraint;
        self
    }
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self::recall(20)
    }
}

impl FromStr for RewardSpec {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        let (name, k) = lower
            .split_once('@')
            .ok_or_else(|| MetricError::UnknownMetric(s.to_string()))?;
        let k: usize = k
            .parse()
            .ok()
            .filter(|&k| k >= 1)
            .ok_or_else(|| MetricError::BadCutoff(s.to_string()))?;
        match name {
            "recall" => Ok(Self::recall(k)),
            "spice" => Ok(Self::spice(k)),
            _ => Err(MetricError::UnknownMetric(s.to_string())),
        }
    }
}

impl fmt::Display for RewardSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            RewardKind::Recall => "recall",
            RewardKind::Spice => "spice",
        };
        write!(f, "{name}@{}", self.k)
    }
}

/// Number of truth triplets matched within the top-k, and the size of the
/// top-k list itself.
fn top_k_matches(predicted: &SceneGraph, truth: &SceneGraph, spec: &RewardSpec) -> (usize, usize) {
    let ranked = rank_triplets(&predicted.triplets);
    let top = top_k(&ranked, spec.k, spec.constraint);
    let matched = match_triplets(
        &predicted.entities,
        &top,
        truth,
        spec.iou_threshold,
        spec.constraint,
    );
    (matched.iter().filter(|&&m| m).count(), top.len())
}

pub fn recall_at_k(predicted: &SceneGraph, truth: &SceneGraph, spec: &RewardSpec) -> f64 {
    let (hits, kept) = top_k_matches(predicted, truth, spec);
    if truth.triplets.is_empty() {
        return if kept == 0 { 1.0 } else { 0.0 };
    }
    hits as f64 / truth.triplets.len() as f64
}

/// Harmonic mean of triplet precision (over the top-k) and triplet recall.
pub fn spice(predicted: &SceneGraph, truth: &SceneGraph, spec: &RewardSpec) -> f64 {
    let (hits, kept) = top_k_matches(predicted, truth, spec);
    if truth.triplets.is_empty() && kept == 0 {
        return 1.0;
    }
    if hits == 0 {
        return 0.0;
    }
    let precision = hits as f64 / kept as f64;
    let recall = hits as f64 / truth.triplets.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn reward(predicted: &SceneGraph, truth: &SceneGraph, spec: &RewardSpec) -> f64 {
    match spec.kind {
        RewardKind::Recall => recall_at_k(predicted, truth, spec),
        RewardKind::Spice => spice(predicted, truth, spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{BBox, Entity, Triplet};

    fn ent(category: usize, k: usize) -> Entity {
        let x = 0.05 * k as f64;
        Entity {
            category,
            bbox: BBox::new(x, 0.1, x + 0.04, 0.6).unwrap(),
            confidence: 1.0,
        }
    }

    fn trip(s: usize, o: usize, p: usize, score: f64) -> Triplet {
        Triplet {
            subject: s,
            object: o,
            predicate: p,
            score,
        }
    }

    fn chain(n_triplets: usize) -> SceneGraph {
        SceneGraph {
            entities: (0..=n_triplets).map(|k| ent(1 + k % 3, k)).collect(),
            triplets: (0..n_triplets).map(|k| trip(k, k + 1, 1 + k % 2, 1.0)).collect(),
        }
    }

    #[test]
    fn parse_and_display() {
        assert_eq!("recall@20".parse::<RewardSpec>().unwrap(), RewardSpec::recall(20));
        assert_eq!("SPICE@50".parse::<RewardSpec>().unwrap(), RewardSpec::spice(50));
        assert!(matches!("mrecall@20".parse::<RewardSpec>(), Err(MetricError::UnknownMetric(_))));
        assert!(matches!("recall@0".parse::<RewardSpec>(), Err(MetricError::BadCutoff(_))));
        assert!("recall".parse::<RewardSpec>().is_err());
        assert_eq!(RewardSpec::spice(7).to_string(), "spice@7");
    }

    #[test]
    fn recall_identity_and_empty() {
        let truth = chain(5);
        assert_eq!(recall_at_k(&truth, &truth, &RewardSpec::recall(20)), 1.0);
        let empty = SceneGraph {
            entities: truth.entities.clone(),
            triplets: vec![],
        };
        assert_eq!(recall_at_k(&empty, &chain(3), &RewardSpec::recall(20)), 0.0);
        assert_eq!(recall_at_k(&empty, &empty, &RewardSpec::recall(20)), 1.0);
        assert_eq!(recall_at_k(&truth, &empty, &RewardSpec::recall(20)), 0.0);
    }

    #[test]
    fn recall_half_with_decoys() {
        let truth = chain(4);
        let mut pred = truth.clone();
        // one exact hit, three wrong predicates, two decoys ranked on top
        pred.triplets = vec![
            trip(0, 1, 1, 0.9),
            trip(1, 2, 1, 0.8),
            trip(2, 3, 2, 0.7),
            trip(3, 4, 1, 0.6),
            trip(4, 0, 1, 0.95),
            trip(2, 0, 2, 0.99),
            // correct, but pair (1, 2) already has a higher-ranked predicate
            trip(1, 2, 2, 0.5),
        ];
        assert_eq!(recall_at_k(&pred, &truth, &RewardSpec::recall(20)), 0.25);
        let free = RewardSpec::recall(20).with_constraint(false);
        assert_eq!(recall_at_k(&pred, &truth, &free), 0.5);
    }

    #[test]
    fn spice_values() {
        let truth = chain(4);
        assert_eq!(spice(&truth, &truth, &RewardSpec::spice(20)), 1.0);

        // 2 predictions, 1 correct -> precision 0.5; recall 1/4
        let mut pred = truth.clone();
        pred.triplets = vec![trip(0, 1, 1, 0.9), trip(0, 2, 1, 0.8)];
        let f = spice(&pred, &truth, &RewardSpec::spice(20));
        let (p, r) = (0.5, 0.25);
        assert!((f - 2.0 * p * r / (p + r)).abs() < 1e-15);
        assert!((f - 1.0 / 3.0).abs() < 1e-15);

        pred.triplets = vec![trip(4, 3, 1, 0.9)];
        assert_eq!(spice(&pred, &truth, &RewardSpec::spice(20)), 0.0);
    }

    #[test]
    fn dispatch() {
        let truth = chain(3);
        assert_eq!(reward(&truth, &truth, &RewardSpec::recall(20)), 1.0);
        let disjoint = SceneGraph {
            entities: truth.entities.clone(),
            triplets: vec![trip(3, 0, 1, 1.0)],
        };
        assert_eq!(reward(&disjoint, &truth, &RewardSpec::spice(20)), 0.0);
    }

    #[test]
    fn recall_monotone_in_k() {
        let truth = chain(6);
        let mut pred = truth.clone();
        pred.triplets = (0..6)
            .flat_map(|s| (0..7).filter(move |&o| o != s).map(move |o| (s, o)))
            .enumerate()
            .map(|(k, (s, o))| trip(s, o, 1 + k % 2, 1.0 / (1.0 + k as f64)))
            .collect();
        let mut last = 0.0;
        for k in 1..50 {
            let r = recall_at_k(&pred, &truth, &RewardSpec::recall(k));
            assert!(r >= last);
            last = r;
        }
    }
}
