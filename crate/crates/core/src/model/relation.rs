//! Value-level relation head and graph decoding.
//!
//! The relation head is linear in the agent embeddings up to the fusion
//! nonlinearity, so everything that depends only on the parameters, only on
//! one agent, or only on one pair is folded ahead of time. Scoring a pair
//! under new categories then costs one fusion and one projection, which is
//! what makes counterfactual rewards affordable.

use rand::Rng;

use crate::autodiff::softmax;
use crate::graph::{BBox, Entity, SceneGraph, Triplet};

use super::{ordered_pairs, pair_index, AgentState, Dims, ModelParameters, Param};

fn matmul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for p in 0..k {
            let aip = a[i * k + p];
            for j in 0..c {
                out[i * c + j] += aip * b[p * c + j];
            }
        }
    }
    out
}

fn matvec(m: &[f64], cols: usize, x: &[f64]) -> Vec<f64> {
    m.chunks(cols)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Column block `[:, start..start + width]` of a row-major matrix.
fn columns(m: &[f64], cols: usize, start: usize, width: usize) -> Vec<f64> {
    m.chunks(cols)
        .flat_map(|row| row[start..start + width].iter().copied())
        .collect()
}

/// Parameter-only parts of the relation head.
#[derive(Debug, Clone)]
pub struct RelationTables {
    dims: Dims,
    /// `2z × h`: entity-fusion left block composed with the hidden part of
    /// the entity projection.
    subject_hidden: Vec<f64>,
    object_hidden: Vec<f64>,
    /// `2z × d`: pair fusion ∘ expansion ∘ pair projection.
    pair_map: Vec<f64>,
    /// Per category, the embedding contribution for the subject / object slot.
    subject_category: Vec<Vec<f64>>,
    object_category: Vec<Vec<f64>>,
    predicate_proj: Vec<f64>,
    bias: Vec<f64>,
}

impl RelationTables {
    pub fn new(params: &ModelParameters) -> Self {
        let d = *params.dims();
        let (h, e, z, f) = (d.hidden, d.embed, d.relation, d.feature);
        let w_o = params.get(Param::EntityProj).values();
        let o_hidden = columns(w_o, h + e, 0, h);
        let o_embed = columns(w_o, h + e, h, e);
        let fx = params.get(Param::FuseEntity).values();
        let fx_subject = columns(fx, 2 * z, 0, z);
        let fx_object = columns(fx, 2 * z, z, z);

        let expand_pair = matmul(
            params.get(Param::RelationExpand).values(),
            params.get(Param::PairProj).values(),
            2 * z,
            z,
            f,
        );
        let pair_map = matmul(params.get(Param::FusePair).values(), &expand_pair, 2 * z, 2 * z, f);

        let emb = params.get(Param::Embedding).values();
        let mut subject_category = Vec::with_capacity(d.num_classes);
        let mut object_category = Vec::with_capacity(d.num_classes);
        for v in 0..d.num_classes {
            let ze = matvec(&o_embed, e, &emb[v * e..(v + 1) * e]);
            subject_category.push(matvec(&fx_subject, z, &ze));
            object_category.push(matvec(&fx_object, z, &ze));
        }
        Self {
            dims: d,
            subject_hidden: matmul(&fx_subject, &o_hidden, 2 * z, z, h),
            object_hidden: matmul(&fx_object, &o_hidden, 2 * z, z, h),
            pair_map,
            subject_category,
            object_category,
            predicate_proj: params.get(Param::PredicateProj).values().to_vec(),
            bias: params.get(Param::FrequencyBias).values().to_vec(),
        }
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }
}

/// Agent- and pair-dependent parts of the relation head for one scene.
#[derive(Debug, Clone)]
pub struct SceneRelations<'a> {
    tables: &'a RelationTables,
    n: usize,
    subject: Vec<Vec<f64>>,
    object: Vec<Vec<f64>>,
    pair: Vec<Vec<f64>>,
}

impl<'a> SceneRelations<'a> {
    pub fn new(tables: &'a RelationTables, state: &AgentState) -> Self {
        let d = tables.dims;
        let n = state.num_agents();
        Self {
            tables,
            n,
            subject: state
                .hidden
                .iter()
                .map(|hi| matvec(&tables.subject_hidden, d.hidden, hi))
                .collect(),
            object: state
                .hidden
                .iter()
                .map(|hj| matvec(&tables.object_hidden, d.hidden, hj))
                .collect(),
            pair: state
                .pair_hidden
                .iter()
                .map(|hij| matvec(&tables.pair_map, d.feature, hij))
                .collect(),
        }
    }

    pub fn num_agents(&self) -> usize {
        self.n
    }

    /// Predicate logits for `(i, j)` with categories `(vi, vj)`.
    pub fn pair_logits(&self, i: usize, j: usize, vi: usize, vj: usize) -> Vec<f64> {
        let t = self.tables;
        let (c, r, z2) = (t.dims.num_classes, t.dims.num_predicates, 2 * t.dims.relation);
        let y = &self.pair[pair_index(self.n, i, j)];
        let (si, oj) = (&self.subject[i], &self.object[j]);
        let (sc, oc) = (&t.subject_category[vi], &t.object_category[vj]);
        let fused: Vec<f64> = (0..z2)
            .map(|k| {
                let x = si[k] + sc[k] + oj[k] + oc[k];
                (x + y[k]).max(0.0) - (x - y[k]).powi(2)
            })
            .collect();
        let bias = &t.bias[(vi * c + vj) * r..(vi * c + vj + 1) * r];
        matvec(&t.predicate_proj, z2, &fused)
            .into_iter()
            .zip(bias)
            .map(|(l, b)| l + b)
            .collect()
    }

    pub fn pair_probs(&self, i: usize, j: usize, vi: usize, vj: usize) -> Vec<f64> {
        softmax(&self.pair_logits(i, j, vi, vj))
    }

    /// Predicate distributions for every ordered pair, in pair order.
    pub fn all_pair_probs(&self, actions: &[usize]) -> Vec<Vec<f64>> {
        ordered_pairs(self.n)
            .map(|(i, j)| self.pair_probs(i, j, actions[i], actions[j]))
            .collect()
    }

    /// Refreshes the pairs touching agent `i` after its category changed.
    pub fn update_agent(&self, pair_probs: &mut [Vec<f64>], actions: &[usize], i: usize) {
        for j in 0..self.n {
            if j != i {
                pair_probs[pair_index(self.n, i, j)] = self.pair_probs(i, j, actions[i], actions[j]);
                pair_probs[pair_index(self.n, j, i)] = self.pair_probs(j, i, actions[j], actions[i]);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Sample,
}

/// Categories, distributions and the assembled predicted graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub actions: Vec<usize>,
    pub object_probs: Vec<Vec<f64>>,
    pub predicate_probs: Vec<Vec<f64>>,
    pub graph: SceneGraph,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = k;
        }
    }
    best
}

/// Inverse-CDF draw from a categorical distribution.
pub fn sample_category<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &pk) in p.iter().enumerate() {
        if pk <= 0.0 {
            continue;
        }
        acc += pk;
        last = k;
        if u < acc {
            return k;
        }
    }
    last
}

/// Builds the predicted graph. Triplet scores are
/// `conf_subject · conf_object · p(predicate)` over non-background
/// predicates; under the graph constraint only the best predicate per
/// ordered pair is emitted.
pub fn assemble_graph(
    actions: &[usize],
    confidences: &[f64],
    pair_probs: &[Vec<f64>],
    boxes: &[BBox],
    constraint: bool,
) -> SceneGraph {
    let n = actions.len();
    let entities = (0..n)
        .map(|i| Entity {
            category: actions[i],
            bbox: boxes[i],
            confidence: confidences[i],
        })
        .collect();
    let mut triplets = Vec::with_capacity(if constraint { n * n } else { n * n * 4 });
    for (k, (i, j)) in ordered_pairs(n).enumerate() {
        let p = &pair_probs[k];
        let conf = confidences[i] * confidences[j];
        if constraint {
            let best = 1 + argmax(&p[1..]);
            triplets.push(Triplet {
                subject: i,
                object: j,
                predicate: best,
                score: conf * p[best],
            });
        } else {
            for (r, &pr) in p.iter().enumerate().skip(1) {
                triplets.push(Triplet {
                    subject: i,
                    object: j,
                    predicate: r,
                    score: conf * pr,
                });
            }
        }
    }
    SceneGraph { entities, triplets }
}

/// Chooses categories (greedy argmax or a draw from each agent's
/// distribution), scores predicates under those categories and assembles the
/// predicted graph.
pub fn decode_graph<R: Rng + ?Sized>(
    state: &AgentState,
    tables: &RelationTables,
    mode: DecodeMode,
    rng: &mut R,
    boxes: &[BBox],
    constraint: bool,
) -> Decoded {
    let object_probs = state.probabilities();
    let actions: Vec<usize> = object_probs
        .iter()
        .map(|p| match mode {
            DecodeMode::Greedy => argmax(p),
            DecodeMode::Sample => sample_category(p, rng),
        })
        .collect();
    let conf: Vec<f64> = actions.iter().zip(&object_probs).map(|(&a, p)| p[a]).collect();
    let scene = SceneRelations::new(tables, state);
    let predicate_probs = scene.all_pair_probs(&actions);
    let graph = assemble_graph(&actions, &conf, &predicate_probs, boxes, constraint);
    Decoded {
        actions,
        object_probs,
        predicate_probs,
        graph,
    }
}
