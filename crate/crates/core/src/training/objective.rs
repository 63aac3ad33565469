//! Per-scene objectives on the tape and their parameter gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::SceneRecord;
use crate::model::{
    sample_category, tape_communicate, tape_relation_logits, ModelParameters, ParamVars, RelationTables, SceneInput,
    TapeState,
};

use super::critic::{advantage, counterfactual_baseline, sc_baseline, scene_counterfactual_baselines, EpisodeScorer};
use super::{stream_seed, Baseline, Result, TrainConfig, TrainError};

/// Summed negative log-likelihood of the object labels and of every
/// ordered pair's predicate label (0 for unannotated pairs).
pub fn xe_terms(
    tape: &mut Tape,
    object_logits: &[Var],
    labels: &[usize],
    pair_logits: &[Var],
    pair_labels: &[usize],
) -> Result<Var> {
    let mut picked = Vec::with_capacity(labels.len() + pair_labels.len());
    for (&l, &y) in object_logits.iter().zip(labels).chain(pair_logits.iter().zip(pair_labels)) {
        let ls = tape.log_softmax(l)?;
        picked.push(tape.element(ls, y)?);
    }
    let stacked = tape.concat(&picked)?;
    let total = tape.sum(stacked);
    Ok(tape.scale(total, -1.0))
}

fn forward(params: &ModelParameters, input: &SceneInput, steps: usize) -> Result<(Tape, ParamVars, TapeState)> {
    let mut tape = Tape::new();
    let pv = params.load(&mut tape, true);
    let st = tape_communicate(&mut tape, &pv, params, input, steps)?;
    Ok((tape, pv, st))
}

fn teacher_forced_xe(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &ModelParameters,
    st: &TapeState,
    record: &SceneRecord,
) -> Result<Var> {
    let labels = record.labels();
    let rel = tape_relation_logits(tape, pv, params, st, &labels)?;
    xe_terms(tape, &st.logits, &labels, &rel, &record.pair_labels())
}

fn collect_grads(tape: &Tape, pv: &ParamVars, loss: Var) -> Result<Vec<Vec<f64>>> {
    let g = tape.backward(loss)?;
    Ok(pv.all().iter().map(|&v| g.get(v)).collect())
}

/// Cross-entropy loss of one scene and its gradient.
pub fn scene_xe_gradient(params: &ModelParameters, record: &SceneRecord, steps: usize) -> Result<(f64, Vec<Vec<f64>>)> {
    let (mut tape, pv, st) = forward(params, &record.input(), steps)?;
    let loss = teacher_forced_xe(&mut tape, &pv, params, &st, record)?;
    let grads = collect_grads(&tape, &pv, loss)?;
    Ok((tape.scalar_value(loss), grads))
}

/// Fixed quantities of a policy objective: the sampled actions, their
/// detached advantages and the regularizer weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTerms {
    pub actions: Vec<usize>,
    pub advantages: Vec<f64>,
    pub alpha: f64,
    pub entropy_coeff: f64,
}

/// Gradient contribution of one scene in stage 2.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub scene: u64,
    pub actions: Vec<usize>,
    pub advantages: Vec<f64>,
    pub baselines: Vec<f64>,
    pub reward: f64,
    pub entropy: f64,
    pub xe: f64,
    /// Value of the minimized loss `-J`.
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

struct PolicyValues {
    loss: f64,
    entropy: f64,
    xe: f64,
    grads: Vec<Vec<f64>>,
}

/// Builds `-(Σ A_i log p_i(v_i) - α·XE + β·Σ H(p_i))` on an existing
/// forward pass and differentiates it.
fn policy_backward(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &ModelParameters,
    st: &TapeState,
    record: &SceneRecord,
    terms: &PolicyTerms,
) -> Result<PolicyValues> {
    let n = st.num_agents();
    if terms.actions.len() != n || terms.advantages.len() != n {
        return Err(TrainError::Config(format!(
            "{} actions and {} advantages for {n} agents",
            terms.actions.len(),
            terms.advantages.len()
        )));
    }
    let mut parts = Vec::with_capacity(n + 2);
    let mut entropies = Vec::with_capacity(n);
    for i in 0..n {
        let ls = tape.log_softmax(st.logits[i])?;
        let lp = tape.element(ls, terms.actions[i])?;
        parts.push(tape.scale(lp, -terms.advantages[i]));
        if terms.entropy_coeff > 0.0 {
            let p = tape.softmax(st.logits[i])?;
            let plogp = tape.dot(p, ls)?;
            entropies.push(plogp);
        }
    }
    let mut entropy = 0.0;
    if !entropies.is_empty() {
        let stacked = tape.concat(&entropies)?;
        let neg_h = tape.sum(stacked);
        entropy = -tape.scalar_value(neg_h);
        parts.push(tape.scale(neg_h, terms.entropy_coeff));
    }
    let mut xe = 0.0;
    if terms.alpha > 0.0 {
        let x = teacher_forced_xe(tape, pv, params, st, record)?;
        xe = tape.scalar_value(x);
        parts.push(tape.scale(x, terms.alpha));
    }
    let stacked = tape.concat(&parts)?;
    let loss = tape.sum(stacked);
    let grads = collect_grads(tape, pv, loss)?;
    Ok(PolicyValues {
        loss: tape.scalar_value(loss),
        entropy,
        xe,
        grads,
    })
}

/// Gradient of the stage-2 loss for given actions and advantages.
pub fn policy_objective_gradient(
    params: &ModelParameters,
    record: &SceneRecord,
    steps: usize,
    terms: &PolicyTerms,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let (mut tape, pv, st) = forward(params, &record.input(), steps)?;
    let v = policy_backward(&mut tape, &pv, params, &st, record, terms)?;
    Ok((v.loss, v.grads))
}

/// Samples one joint action for the scene, scores it, computes the
/// configured baseline per agent and differentiates the stage-2 loss.
/// `ma_value` is the moving-average baseline in effect for this batch.
pub fn scene_policy_gradient(
    params: &ModelParameters,
    tables: &RelationTables,
    record: &SceneRecord,
    config: &TrainConfig,
    iteration: u64,
    ma_value: f64,
) -> Result<GradSample> {
    let (mut tape, pv, st) = forward(params, &record.input(), config.steps)?;
    let state = st.values(&tape);
    let boxes = record.boxes();
    let scorer = EpisodeScorer::new(tables, &state, &boxes, &record.truth, config.reward);

    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, record.id, iteration));
    let actions: Vec<usize> = scorer
        .probabilities()
        .iter()
        .map(|p| sample_category(p, &mut rng))
        .collect();
    let reward = scorer.reward(&actions);
    let n = actions.len();
    let baselines = match config.baseline {
        Baseline::Cf => scene_counterfactual_baselines(&scorer, &actions, config.cb_budget)?,
        Baseline::Sc => vec![sc_baseline(&scorer); n],
        Baseline::Ma => vec![ma_value; n],
        Baseline::None => vec![0.0; n],
    };
    let advantages: Vec<f64> = baselines.iter().map(|&b| advantage(reward, b)).collect();
    let terms = PolicyTerms {
        actions,
        advantages,
        alpha: config.alpha,
        entropy_coeff: config.entropy_coeff,
    };
    let v = policy_backward(&mut tape, &pv, params, &st, record, &terms)?;
    Ok(GradSample {
        scene: record.id,
        actions: terms.actions,
        advantages: terms.advantages,
        baselines,
        reward,
        entropy: v.entropy,
        xe: v.xe,
        loss: v.loss,
        grads: v.grads,
    })
}

/// Outcome of enumerating the baseline's contribution to the expected
/// policy gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LemmaReport {
    /// `Σ_V P(V) Σ_i CB^i(V_-i) ∇log p_i(v_i)`, per parameter array.
    pub contribution: Vec<Vec<f64>>,
    pub norm: f64,
    /// `Σ_V P(V) Σ_i |CB^i(V_-i)| · ‖∇log p_i(v_i)‖`.
    pub scale: f64,
    pub joint_actions: usize,
}

impl LemmaReport {
    pub fn relative(&self) -> f64 {
        if self.scale == 0.0 {
            self.norm
        } else {
            self.norm / self.scale
        }
    }
}

/// Exact expectation, over every joint action, of the baseline term of the
/// policy gradient. Refused when `|C|^n` exceeds `max_joint`.
pub fn expected_baseline_contribution(
    params: &ModelParameters,
    input: &SceneInput,
    steps: usize,
    reward_fn: impl Fn(&[usize]) -> f64,
    max_joint: usize,
) -> Result<LemmaReport> {
    let n = input.num_agents();
    let c = params.dims().num_classes;
    let joint = (0..n).try_fold(1usize, |acc, _| acc.checked_mul(c).filter(|&j| j <= max_joint));
    let Some(joint) = joint else {
        return Err(TrainError::Enumeration(format!(
            "{c}^{n} joint actions exceed the cap of {max_joint}"
        )));
    };

    let (mut tape, pv, st) = forward(params, input, steps)?;
    let probs = st.values(&tape).probabilities();
    // ∇log p_i(v), flattened over all parameters
    let mut score_grads = vec![vec![Vec::new(); c]; n];
    for i in 0..n {
        let ls = tape.log_softmax(st.logits[i])?;
        for v in 0..c {
            let lp = tape.element(ls, v)?;
            score_grads[i][v] = collect_grads(&tape, &pv, lp)?.concat();
        }
    }
    let norms: Vec<Vec<f64>> = score_grads
        .iter()
        .map(|row| row.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>().sqrt()).collect())
        .collect();

    let width = score_grads[0][0].len();
    let mut total = vec![0.0; width];
    let mut scale = 0.0;
    let mut actions = vec![0usize; n];
    for code in 0..joint {
        let mut rest = code;
        for a in actions.iter_mut() {
            *a = rest % c;
            rest /= c;
        }
        let weight: f64 = actions.iter().enumerate().map(|(i, &a)| probs[i][a]).product();
        for i in 0..n {
            let cb = counterfactual_baseline(&probs[i], 0, |cands| {
                let mut acts = actions.clone();
                cands
                    .iter()
                    .map(|&v| {
                        acts[i] = v;
                        reward_fn(&acts)
                    })
                    .collect()
            })?;
            let w = weight * cb;
            for (t, g) in total.iter_mut().zip(&score_grads[i][actions[i]]) {
                *t += w * g;
            }
            scale += (weight * cb).abs() * norms[i][actions[i]];
        }
    }

    let norm = total.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut contribution = Vec::with_capacity(params.tensors().len());
    let mut offset = 0;
    for t in params.tensors() {
        contribution.push(total[offset..offset + t.len()].to_vec());
        offset += t.len();
    }
    Ok(LemmaReport {
        contribution,
        norm,
        scale,
        joint_actions: joint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, Tensor};
    use crate::data::{generate, WorldOptions, WorldSpec};
    use crate::graph::BBox;
    use crate::metrics::RewardSpec;
    use crate::model::{communicate, Dims};

    fn dims() -> Dims {
        Dims {
            hidden: 4,
            feature: 3,
            embed: 2,
            relation: 2,
            num_classes: 4,
            num_predicates: 3,
        }
    }

    fn scenes(count: usize, seed: u64) -> Vec<SceneRecord> {
        let world = WorldSpec::synthetic(&WorldOptions {
            num_classes: 4,
            num_predicates: 3,
            feature_dim: 3,
            mean_objects: 3.0,
            min_objects: 2,
            max_objects: 3,
            relation_rate: 0.4,
            seed,
            ..WorldOptions::default()
        })
        .unwrap();
        generate(&world, count).unwrap()
    }

    #[test]
    fn uniform_predictions_closed_form() {
        let mut tape = Tape::new();
        let obj: Vec<Var> = (0..2).map(|_| tape.constant(vec![0.0; 4]).unwrap()).collect();
        let rel: Vec<Var> = (0..2).map(|_| tape.constant(vec![0.0; 3]).unwrap()).collect();
        let loss = xe_terms(&mut tape, &obj, &[1, 3], &rel, &[0, 2]).unwrap();
        let want = 2.0 * 4f64.ln() + 2.0 * 3f64.ln();
        assert!((tape.scalar_value(loss) - want).abs() < 1e-12);
    }

    #[test]
    fn point_mass_predictions_have_zero_loss() {
        let mut tape = Tape::new();
        let obj = vec![tape.constant(vec![-800.0, 800.0, -800.0]).unwrap()];
        let rel = vec![tape.constant(vec![900.0, -900.0]).unwrap()];
        let loss = xe_terms(&mut tape, &obj, &[1], &rel, &[0]).unwrap();
        assert!(tape.scalar_value(loss).abs() < 1e-12);
    }

    fn flat_check(
        params: &ModelParameters,
        loss_of: impl Fn(&ModelParameters) -> f64,
        grads: Vec<Vec<f64>>,
    ) -> f64 {
        let dims = *params.dims();
        let report = finite_diff_check(
            |ts: &[Tensor]| Ok(loss_of(&ModelParameters::from_tensors(dims, ts.to_vec()).unwrap())),
            |_| Ok(grads),
            params.tensors(),
            1e-5,
        )
        .unwrap();
        report.max_relative_error
    }

    #[test]
    fn xe_gradient_matches_finite_differences() {
        let rec = &scenes(4, 2)[0];
        let params = ModelParameters::init(dims(), 3);
        let (_, grads) = scene_xe_gradient(&params, rec, 2).unwrap();
        let err = flat_check(&params, |p| scene_xe_gradient(p, rec, 2).unwrap().0, grads);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn frozen_policy_term_matches_finite_differences() {
        let rec = &scenes(4, 5)[1];
        let params = ModelParameters::init(dims(), 9);
        let n = rec.num_entities();
        let terms = PolicyTerms {
            actions: (0..n).map(|i| 1 + i % 3).collect(),
            advantages: (0..n).map(|i| 0.3 - 0.2 * i as f64).collect(),
            alpha: 0.0,
            entropy_coeff: 0.0,
        };
        let (_, grads) = policy_objective_gradient(&params, rec, 2, &terms).unwrap();
        let err = flat_check(&params, |p| policy_objective_gradient(p, rec, 2, &terms).unwrap().0, grads);
        assert!(err < 1e-4, "{err}");
        let full = PolicyTerms {
            alpha: 0.7,
            entropy_coeff: 0.05,
            ..terms
        };
        let (_, grads) = policy_objective_gradient(&params, rec, 2, &full).unwrap();
        let err = flat_check(&params, |p| policy_objective_gradient(p, rec, 2, &full).unwrap().0, grads);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_advantages_and_weights_give_zero_gradient() {
        let rec = &scenes(2, 1)[0];
        let params = ModelParameters::init(dims(), 1);
        let n = rec.num_entities();
        let terms = PolicyTerms {
            actions: vec![1; n],
            advantages: vec![0.0; n],
            alpha: 0.0,
            entropy_coeff: 0.0,
        };
        let (_, grads) = policy_objective_gradient(&params, rec, 2, &terms).unwrap();
        assert!(grads.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn no_baseline_is_plain_reinforce() {
        let rec = &scenes(3, 4)[2];
        let params = ModelParameters::init(dims(), 6);
        let config = TrainConfig {
            hidden: 4,
            embed: 2,
            relation: 2,
            baseline: Baseline::None,
            ..TrainConfig::default()
        };
        let tables = RelationTables::new(&params);
        let s = scene_policy_gradient(&params, &tables, rec, &config, 7, 0.0).unwrap();
        assert!(s.baselines.iter().all(|&b| b == 0.0));
        let terms = PolicyTerms {
            actions: s.actions.clone(),
            advantages: vec![s.reward; s.actions.len()],
            alpha: config.alpha,
            entropy_coeff: config.entropy_coeff,
        };
        let (_, grads) = policy_objective_gradient(&params, rec, config.steps, &terms).unwrap();
        assert_eq!(grads, s.grads);
    }

    #[test]
    fn constant_reward_gives_zero_cf_advantage() {
        let rec = &scenes(3, 8)[0];
        let params = ModelParameters::init(dims(), 2);
        let config = TrainConfig {
            hidden: 4,
            embed: 2,
            relation: 2,
            reward: RewardSpec::recall(20),
            ..TrainConfig::default()
        };
        let tables = RelationTables::new(&params);
        let mut empty = rec.clone();
        empty.truth.triplets.clear();
        let s = scene_policy_gradient(&params, &tables, &empty, &config, 0, 0.0).unwrap();
        assert!(s.advantages.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn global_baselines_are_shared_across_agents() {
        let rec = &scenes(3, 3)[1];
        let params = ModelParameters::init(dims(), 4);
        let tables = RelationTables::new(&params);
        for baseline in [Baseline::Sc, Baseline::Ma] {
            let config = TrainConfig {
                hidden: 4,
                embed: 2,
                relation: 2,
                baseline,
                ..TrainConfig::default()
            };
            let s = scene_policy_gradient(&params, &tables, rec, &config, 1, 0.4).unwrap();
            assert!(s.baselines.windows(2).all(|w| w[0] == w[1]));
        }
    }

    fn lemma_instance(n: usize, seed: u64) -> (ModelParameters, SceneInput, Vec<BBox>, crate::graph::SceneGraph) {
        let rec = scenes(40, seed).into_iter().find(|r| r.num_entities() == n).unwrap();
        let mut params = ModelParameters::init(dims(), seed);
        for v in params.get_mut(crate::model::Param::ClassProj).values_mut() {
            *v *= 3.0;
        }
        // keep foreground predicates in play so rewards are not all zero
        for (j, v) in params.get_mut(crate::model::Param::FrequencyBias).values_mut().iter_mut().enumerate() {
            *v = if j % 3 == 0 { -1.0 } else { 0.5 };
        }
        (params, rec.input(), rec.boxes(), rec.truth)
    }

    #[test]
    fn baseline_has_zero_expected_contribution() {
        let mut checked = 0;
        for seed in 0..20 {
            let (params, input, boxes, truth) = lemma_instance(3, seed);
            let tables = RelationTables::new(&params);
            let state = communicate(&input, &params, 2).unwrap();
            let scorer = EpisodeScorer::new(&tables, &state, &boxes, &truth, RewardSpec::recall(20));
            let report = expected_baseline_contribution(&params, &input, 2, |a| scorer.reward(a), 1 << 12).unwrap();
            assert_eq!(report.joint_actions, 64);
            if report.scale == 0.0 {
                // reward is zero everywhere, nothing to cancel
                assert_eq!(report.norm, 0.0);
                continue;
            }
            checked += 1;
            assert!(report.norm <= 1e-10 * report.scale.max(1e-300), "{} vs {}", report.norm, report.scale);
        }
        assert!(checked >= 5, "{checked} non-trivial instances");
    }

    #[test]
    fn single_agent_two_categories_is_zero() {
        let d = Dims {
            num_classes: 2,
            ..dims()
        };
        let params = ModelParameters::init(d, 1);
        let input = SceneInput {
            features: vec![vec![0.3, -0.2, 0.9]],
            init_logits: vec![vec![0.4, -0.1]],
            pair_features: vec![],
        };
        let report = expected_baseline_contribution(&params, &input, 1, |a| a[0] as f64, 16).unwrap();
        assert!(report.norm <= 1e-15, "{}", report.norm);
    }

    #[test]
    fn enumeration_cap_enforced() {
        let (params, input, _, _) = lemma_instance(3, 0);
        assert!(matches!(
            expected_baseline_contribution(&params, &input, 1, |_| 0.0, 63),
            Err(TrainError::Enumeration(_))
        ));
    }
}
