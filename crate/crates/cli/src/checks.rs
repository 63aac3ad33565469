//! Small random instances for gradient and baseline-lemma verification.

use cmat::autodiff::{finite_diff_check, GradCheckReport, Tensor};
use cmat::data::SceneRecord;
use cmat::graph::{BBox, Entity, SceneGraph, Triplet};
use cmat::metrics::RewardSpec;
use cmat::model::{communicate, Dims, ModelParameters, Param, RelationTables};
use cmat::training::{expected_baseline_contribution, policy_objective_gradient, EpisodeScorer, LemmaReport, PolicyTerms};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, Result};

pub const CHECK_CLASSES: usize = 4;
pub const CHECK_PREDICATES: usize = 3;
pub const CHECK_FEATURE: usize = 4;

pub fn check_dims(hidden: usize, embed: usize, relation: usize) -> Dims {
    Dims {
        hidden,
        feature: CHECK_FEATURE,
        embed,
        relation,
        num_classes: CHECK_CLASSES,
        num_predicates: CHECK_PREDICATES,
    }
}

/// Parameters with every array (including the frequency bias) away from
/// zero, so no gradient block is trivially checked.
pub fn random_params(dims: Dims, seed: u64) -> ModelParameters {
    let mut params = ModelParameters::init(dims, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfb);
    for v in params.get_mut(Param::FrequencyBias).values_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    for v in params.get_mut(Param::ClassProj).values_mut() {
        *v *= 3.0;
    }
    params
}

/// A scene with `n` entities, random inputs and a random truth graph.
pub fn random_scene(dims: &Dims, n: usize, seed: u64) -> SceneRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut row = |len: usize| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let features = (0..n).map(|_| row(dims.feature)).collect();
    let init_logits = (0..n).map(|_| row(dims.num_classes)).collect();
    let pair_features = (0..n * n.saturating_sub(1)).map(|_| row(dims.feature)).collect();
    let entities: Vec<Entity> = (0..n)
        .map(|i| Entity {
            category: rng.gen_range(1..dims.num_classes),
            bbox: BBox::new(i as f64 / n as f64, 0.0, (i as f64 + 0.8) / n as f64, 1.0).expect("unit box"),
            confidence: 1.0,
        })
        .collect();
    let mut triplets = Vec::new();
    for s in 0..n {
        for o in 0..n {
            if s != o && rng.gen::<f64>() < 0.6 {
                triplets.push(Triplet {
                    subject: s,
                    object: o,
                    predicate: rng.gen_range(1..dims.num_predicates),
                    score: 1.0,
                });
            }
        }
    }
    SceneRecord {
        id: seed,
        truth: SceneGraph { entities, triplets },
        features,
        init_logits,
        pair_features,
    }
}

/// Central differences of the full stage-2 loss (policy term with fixed
/// advantages, cross-entropy and entropy) against the tape gradient.
pub fn model_gradcheck(dims: Dims, n: usize, steps: usize, seed: u64) -> Result<GradCheckReport> {
    let params = random_params(dims, seed);
    let record = random_scene(&dims, n, seed + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let terms = PolicyTerms {
        actions: (0..n).map(|_| rng.gen_range(0..dims.num_classes)).collect(),
        advantages: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        alpha: 0.5,
        entropy_coeff: 0.1,
    };
    let (_, grads) = policy_objective_gradient(&params, &record, steps, &terms)?;
    let report = finite_diff_check(
        |ts: &[Tensor]| {
            let p = ModelParameters::from_tensors(dims, ts.to_vec()).map_err(|_| cmat::autodiff::AutodiffError::NonFinite)?;
            policy_objective_gradient(&p, &record, steps, &terms)
                .map(|(l, _)| l)
                .map_err(|_| cmat::autodiff::AutodiffError::NonFinite)
        },
        |_| Ok(grads),
        params.tensors(),
        1e-4,
    )?;
    Ok(report)
}

/// Baseline-lemma residual on one random instance with `n` agents. The
/// reward is recall@20 of the decoded graph.
pub fn lemma_check(dims: Dims, n: usize, steps: usize, seed: u64, max_joint: usize) -> Result<LemmaReport> {
    let params = random_params(dims, seed);
    let record = random_scene(&dims, n, seed + 1);
    let input = record.input();
    let state = communicate(&input, &params, steps)?;
    let tables = RelationTables::new(&params);
    let boxes = record.boxes();
    let scorer = EpisodeScorer::new(&tables, &state, &boxes, &record.truth, RewardSpec::recall(20));
    Ok(expected_baseline_contribution(
        &params,
        &input,
        steps,
        |a| scorer.reward(a),
        max_joint,
    )?)
}

/// Largest agent count not above `wanted` whose joint action space fits
/// under `max_joint`.
pub fn enumerable_agents(wanted: usize, classes: usize, max_joint: usize) -> Result<usize> {
    (1..=wanted)
        .rev()
        .find(|&n| classes.checked_pow(n as u32).is_some_and(|j| j <= max_joint))
        .ok_or_else(|| CliError::Validation(format!("even one agent with {classes} categories exceeds the cap {max_joint}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduced_instance_fits_cap() {
        assert_eq!(enumerable_agents(3, 4, 64).unwrap(), 3);
        assert_eq!(enumerable_agents(3, 4, 63).unwrap(), 2);
        assert!(enumerable_agents(3, 4, 3).is_err());
    }

    #[test]
    fn random_scenes_validate() {
        let dims = check_dims(5, 3, 3);
        let vocab = cmat::graph::Vocab::synthetic(CHECK_CLASSES, CHECK_PREDICATES);
        for seed in 0..10 {
            random_scene(&dims, 3, seed).check(&vocab, Some(CHECK_FEATURE)).unwrap();
        }
    }
}
