//! Communicative agent network and relation head.
//!
//! Each detected entity is an agent. Agents run `T` rounds of
//! extract → message → update, then a final extract produces the category
//! logits that act as each agent's policy. A relation head scores predicates
//! for every ordered pair given the agents' chosen categories.

mod checkpoint;
mod network;
mod relation;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use network::{
    attention_update, communicate, compose_messages, extract_step, init_states, predict_relations,
    tape_communicate, tape_relation_logits, Messages, TapeState,
};
pub use relation::{argmax, assemble_graph, decode_graph, sample_category, DecodeMode, Decoded, RelationTables, SceneRelations};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("scene input: {0}")]
    Input(String),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Network sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Agent hidden state size.
    pub hidden: usize,
    /// Input and pairwise feature size.
    pub feature: usize,
    /// Category embedding size.
    pub embed: usize,
    /// Relation feature size.
    pub relation: usize,
    pub num_classes: usize,
    pub num_predicates: usize,
}

/// Learnable arrays, in checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Param {
    LstmInput,
    LstmHidden,
    LstmBias,
    ClassProj,
    Embedding,
    UnaryMessage,
    PairMessage,
    UnaryAttention,
    PairAttention,
    InputUpdate,
    PairSubject,
    PairObject,
    EntityProj,
    PairProj,
    RelationExpand,
    FuseEntity,
    FusePair,
    PredicateProj,
    FrequencyBias,
}

impl Param {
    pub const ALL: [Param; 19] = [
        Param::LstmInput,
        Param::LstmHidden,
        Param::LstmBias,
        Param::ClassProj,
        Param::Embedding,
        Param::UnaryMessage,
        Param::PairMessage,
        Param::UnaryAttention,
        Param::PairAttention,
        Param::InputUpdate,
        Param::PairSubject,
        Param::PairObject,
        Param::EntityProj,
        Param::PairProj,
        Param::RelationExpand,
        Param::FuseEntity,
        Param::FusePair,
        Param::PredicateProj,
        Param::FrequencyBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Param::LstmInput => "lstm.w_input",
            Param::LstmHidden => "lstm.w_hidden",
            Param::LstmBias => "lstm.bias",
            Param::ClassProj => "extract.class_proj",
            Param::Embedding => "extract.embedding",
            Param::UnaryMessage => "message.unary",
            Param::PairMessage => "message.pair",
            Param::UnaryAttention => "update.unary_attention",
            Param::PairAttention => "update.pair_attention",
            Param::InputUpdate => "update.input",
            Param::PairSubject => "update.pair_subject",
            Param::PairObject => "update.pair_object",
            Param::EntityProj => "relation.entity_proj",
            Param::PairProj => "relation.pair_proj",
            Param::RelationExpand => "relation.expand",
            Param::FuseEntity => "relation.fuse_entity",
            Param::FusePair => "relation.fuse_pair",
            Param::PredicateProj => "relation.predicate_proj",
            Param::FrequencyBias => "relation.frequency_bias",
        }
    }

    pub fn shape(self, d: &Dims) -> Vec<usize> {
        let (h, f, e, z) = (d.hidden, d.feature, d.embed, d.relation);
        match self {
            Param::LstmInput => vec![4 * h, f + e],
            Param::LstmHidden => vec![4 * h, h],
            Param::LstmBias => vec![4 * h],
            Param::ClassProj => vec![d.num_classes, h],
            Param::Embedding => vec![d.num_classes, e],
            Param::UnaryMessage => vec![h, h],
            Param::PairMessage => vec![h, f],
            Param::UnaryAttention => vec![2 * h],
            Param::PairAttention => vec![h + f],
            Param::InputUpdate | Param::PairSubject | Param::PairObject => vec![f, h],
            Param::EntityProj => vec![z, h + e],
            Param::PairProj => vec![z, f],
            Param::RelationExpand => vec![2 * z, z],
            Param::FuseEntity | Param::FusePair => vec![2 * z, 2 * z],
            Param::PredicateProj => vec![d.num_predicates, 2 * z],
            Param::FrequencyBias => vec![d.num_classes, d.num_classes, d.num_predicates],
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Every learnable array of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    dims: Dims,
    tensors: Vec<Tensor>,
}

impl ModelParameters {
    /// Seeded initialization. LSTM weights and biases are uniform in
    /// `[-0.1, 0.1]` with the forget-gate bias set to 1; other matrices use
    /// Glorot-uniform bounds; the frequency bias starts at zero.
    pub fn init(dims: Dims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = Param::ALL
            .iter()
            .map(|&p| {
                let shape = p.shape(&dims);
                let count: usize = shape.iter().product();
                let bound = match p {
                    Param::LstmInput | Param::LstmHidden | Param::LstmBias => 0.1,
                    Param::FrequencyBias => 0.0,
                    _ => {
                        let fan_out = shape[0];
                        let fan_in = if shape.len() > 1 { shape[1] } else { 1 };
                        (6.0 / (fan_in + fan_out) as f64).sqrt()
                    }
                };
                let mut values: Vec<f64> = (0..count)
                    .map(|_| if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 })
                    .collect();
                if p == Param::LstmBias {
                    let h = dims.hidden;
                    values[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
                }
                Tensor::new(shape, values).expect("finite init")
            })
            .collect();
        Self { dims, tensors }
    }

    pub fn from_tensors(dims: Dims, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != Param::ALL.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                Param::ALL.len(),
                tensors.len()
            )));
        }
        for (p, t) in Param::ALL.iter().zip(&tensors) {
            let expected = p.shape(&dims);
            if t.shape() != expected.as_slice() {
                return Err(ModelError::ParamShape {
                    name: p.name().to_string(),
                    expected,
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(Self { dims, tensors })
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn get(&self, p: Param) -> &Tensor {
        &self.tensors[p.index()]
    }

    pub fn get_mut(&mut self, p: Param) -> &mut Tensor {
        &mut self.tensors[p.index()]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every array on `tape` as a leaf.
    pub fn load(&self, tape: &mut Tape, requires_grad: bool) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), requires_grad))
                .collect(),
        }
    }
}

/// Tape handles for every parameter array.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn get(&self, p: Param) -> Var {
        self.vars[p.index()]
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

/// Detector-stage outputs for one scene: per-entity input features and
/// initial category logits, and a feature vector for every ordered pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInput {
    pub features: Vec<Vec<f64>>,
    pub init_logits: Vec<Vec<f64>>,
    /// Indexed by [`pair_index`].
    pub pair_features: Vec<Vec<f64>>,
}

impl SceneInput {
    pub fn num_agents(&self) -> usize {
        self.features.len()
    }

    pub fn check(&self, dims: &Dims) -> Result<()> {
        let n = self.features.len();
        if n == 0 {
            return Err(ModelError::Input("scene has no entities".into()));
        }
        if self.init_logits.len() != n {
            return Err(ModelError::Input(format!(
                "{} logit rows for {n} entities",
                self.init_logits.len()
            )));
        }
        if self.pair_features.len() != n * (n - 1) {
            return Err(ModelError::Input(format!(
                "{} pair rows for {n} entities",
                self.pair_features.len()
            )));
        }
        let bad = |rows: &[Vec<f64>], len: usize| rows.iter().any(|r| r.len() != len || r.iter().any(|v| !v.is_finite()));
        if bad(&self.features, dims.feature) || bad(&self.pair_features, dims.feature) {
            return Err(ModelError::Input(format!(
                "features must be finite {}-vectors",
                dims.feature
            )));
        }
        if bad(&self.init_logits, dims.num_classes) {
            return Err(ModelError::Input(format!(
                "initial logits must be finite {}-vectors",
                dims.num_classes
            )));
        }
        Ok(())
    }
}

/// Position of ordered pair `(i, j)`, `i != j`, among `n` agents:
/// subject-major, skipping the diagonal.
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i != j && i < n && j < n);
    i * (n - 1) + if j < i { j } else { j - 1 }
}

/// Ordered pairs in [`pair_index`] order.
pub fn ordered_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
}

/// Agent states at a communication step.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub step: usize,
    pub hidden: Vec<Vec<f64>>,
    pub cell: Vec<Vec<f64>>,
    pub input: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub embedding: Vec<Vec<f64>>,
    pub pair_hidden: Vec<Vec<f64>>,
}

impl AgentState {
    pub fn num_agents(&self) -> usize {
        self.hidden.len()
    }

    /// Category distribution of every agent.
    pub fn probabilities(&self) -> Vec<Vec<f64>> {
        self.logits.iter().map(|s| crate::autodiff::softmax(s)).collect()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn small_dims() -> Dims {
        Dims {
            hidden: 5,
            feature: 4,
            embed: 3,
            relation: 3,
            num_classes: 4,
            num_predicates: 3,
        }
    }

    #[test]
    fn pair_index_is_dense() {
        for n in 1..6 {
            let idx: Vec<usize> = ordered_pairs(n).map(|(i, j)| pair_index(n, i, j)).collect();
            assert_eq!(idx, (0..n * (n - 1)).collect::<Vec<_>>());
        }
    }

    #[test]
    fn init_shapes_and_forget_bias() {
        let dims = small_dims();
        let p = ModelParameters::init(dims, 3);
        for param in Param::ALL {
            assert_eq!(p.get(param).shape(), param.shape(&dims).as_slice());
        }
        let bias = p.get(Param::LstmBias).values();
        assert!(bias[5..10].iter().all(|&v| v == 1.0));
        assert!(bias[..5].iter().all(|v| v.abs() <= 0.1));
        assert!(p.get(Param::FrequencyBias).values().iter().all(|&v| v == 0.0));
        assert_eq!(p, ModelParameters::init(dims, 3));
        assert_ne!(p, ModelParameters::init(dims, 4));
    }

    #[test]
    fn from_tensors_checks_shapes() {
        let dims = small_dims();
        let mut tensors = ModelParameters::init(dims, 1).tensors().to_vec();
        tensors[4] = Tensor::zeros(vec![2, 2]);
        assert!(matches!(
            ModelParameters::from_tensors(dims, tensors),
            Err(ModelError::ParamShape { .. })
        ));
    }
}
