//! Counterfactual-critic multi-agent training for scene-graph labeling.
//!
//! Objects in a scene are agents that communicate for a few rounds and then
//! each pick a category. A relation head scores predicates between every
//! ordered pair, and the resulting graph is rewarded with a graph-level
//! metric. Training first fits the network with cross-entropy, then
//! fine-tunes it with a multi-agent policy gradient whose per-agent baseline
//! marginalizes that agent's action while the others stay fixed.

pub mod autodiff;
pub mod data;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod training;
