//! Episode rewards and the per-agent baselines compared against them.

use crate::graph::{BBox, SceneGraph};
use crate::metrics::{reward, RewardSpec};
use crate::model::{argmax, assemble_graph, AgentState, RelationTables, SceneRelations};

use super::{Result, TrainError};

/// Scores predicted graphs for one scene after communication has finished.
///
/// Predicates are always the greedy choice under the agents' categories, and
/// an agent's confidence is the probability it assigned to its own category.
pub struct EpisodeScorer<'a> {
    relations: SceneRelations<'a>,
    probs: Vec<Vec<f64>>,
    boxes: &'a [BBox],
    truth: &'a SceneGraph,
    spec: RewardSpec,
}

impl<'a> EpisodeScorer<'a> {
    pub fn new(
        tables: &'a RelationTables,
        state: &AgentState,
        boxes: &'a [BBox],
        truth: &'a SceneGraph,
        spec: RewardSpec,
    ) -> Self {
        Self {
            relations: SceneRelations::new(tables, state),
            probs: state.probabilities(),
            boxes,
            truth,
            spec,
        }
    }

    pub fn num_agents(&self) -> usize {
        self.probs.len()
    }

    pub fn probabilities(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn greedy_actions(&self) -> Vec<usize> {
        self.probs.iter().map(|p| argmax(p)).collect()
    }

    fn confidences(&self, actions: &[usize]) -> Vec<f64> {
        actions.iter().zip(&self.probs).map(|(&a, p)| p[a]).collect()
    }

    fn score(&self, actions: &[usize], pair_probs: &[Vec<f64>]) -> f64 {
        let graph = assemble_graph(
            actions,
            &self.confidences(actions),
            pair_probs,
            self.boxes,
            self.spec.constraint,
        );
        reward(&graph, self.truth, &self.spec)
    }

    pub fn reward(&self, actions: &[usize]) -> f64 {
        self.score(actions, &self.relations.all_pair_probs(actions))
    }

    /// Rewards with agent `i` switched to each of `candidates`, all other
    /// agents keeping `actions`. Only the pairs touching `i` are rescored.
    pub fn counterfactual_rewards(&self, actions: &[usize], i: usize, candidates: &[usize]) -> Vec<f64> {
        let mut pairs = self.relations.all_pair_probs(actions);
        let mut acts = actions.to_vec();
        candidates
            .iter()
            .map(|&v| {
                acts[i] = v;
                self.relations.update_agent(&mut pairs, &acts, i);
                self.score(&acts, &pairs)
            })
            .collect()
    }
}

/// Categories marginalized for one agent, with their weights.
///
/// `budget == 0` or `budget >= |C| - 1` uses every category with its own
/// probability. Otherwise the `budget` most probable non-background
/// categories plus background are used, renormalized to sum to one.
pub fn candidate_set(probs: &[f64], budget: usize) -> Result<Vec<(usize, f64)>> {
    let c = probs.len();
    if budget > c {
        return Err(TrainError::Config(format!(
            "cb_budget {budget} exceeds the {c} object categories"
        )));
    }
    if budget == 0 || budget + 1 >= c {
        return Ok(probs.iter().copied().enumerate().collect());
    }
    let mut fg: Vec<usize> = (1..c).collect();
    fg.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = std::iter::once(0).chain(fg.into_iter().take(budget)).collect();
    picked.sort_unstable();
    let total: f64 = picked.iter().map(|&v| probs[v]).sum();
    Ok(picked.into_iter().map(|v| (v, probs[v] / total)).collect())
}

/// `Σ_ṽ p̂(ṽ) · R(ṽ)` over the candidate set, where `reward_of(ṽ)` is the
/// reward with this agent's action replaced by `ṽ`.
pub fn counterfactual_baseline(
    probs: &[f64],
    budget: usize,
    reward_of: impl FnOnce(&[usize]) -> Vec<f64>,
) -> Result<f64> {
    let set = candidate_set(probs, budget)?;
    let cats: Vec<usize> = set.iter().map(|&(v, _)| v).collect();
    let rewards = reward_of(&cats);
    let mut cb = 0.0;
    for (&(_, w), &r) in set.iter().zip(&rewards) {
        cb += w * r;
    }
    if set.len() < probs.len() {
        // renormalized weights can sum to 1 + ulp; keep the mean inside its range
        let lo = rewards.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        cb = cb.clamp(lo, hi);
    }
    Ok(cb)
}

/// Counterfactual baselines for every agent of a scene.
pub fn scene_counterfactual_baselines(scorer: &EpisodeScorer, actions: &[usize], budget: usize) -> Result<Vec<f64>> {
    (0..scorer.num_agents())
        .map(|i| {
            counterfactual_baseline(&scorer.probabilities()[i], budget, |cands| {
                scorer.counterfactual_rewards(actions, i, cands)
            })
        })
        .collect()
}

pub fn advantage(reward: f64, baseline: f64) -> f64 {
    reward - baseline
}

/// Reward of the greedy decode, shared by every agent.
pub fn sc_baseline(scorer: &EpisodeScorer) -> f64 {
    scorer.reward(&scorer.greedy_actions())
}

/// Mean of the last `window` rewards; 0 before any reward is seen.
pub fn ma_baseline(history: &[f64], window: usize) -> f64 {
    let start = history.len().saturating_sub(window);
    let tail = &history[start..];
    if tail.is_empty() {
        0.0
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}
