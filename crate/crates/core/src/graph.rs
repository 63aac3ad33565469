//! Scene-graph data model, box geometry and triplet matching.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Object and predicate vocabularies. Index 0 is background in the object
/// list and no-relationship in the predicate list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub object_categories: Vec<String>,
    pub predicate_categories: Vec<String>,
}

impl Vocab {
    pub fn new(
        object_categories: Vec<String>,
        predicate_categories: Vec<String>,
    ) -> Result<Self, Vec<Violation>> {
        let vocab = Self {
            object_categories,
            predicate_categories,
        };
        let violations = vocab.violations();
        if violations.is_empty() {
            Ok(vocab)
        } else {
            Err(violations)
        }
    }

    /// Vocabulary with generated names: `background`, `obj1`, ... and
    /// `no_relation`, `pred1`, ...
    pub fn synthetic(num_objects: usize, num_predicates: usize) -> Self {
        let mut objects = vec!["background".to_string()];
        objects.extend((1..num_objects).map(|k| format!("obj{k}")));
        let mut predicates = vec!["no_relation".to_string()];
        predicates.extend((1..num_predicates).map(|k| format!("pred{k}")));
        Self {
            object_categories: objects,
            predicate_categories: predicates,
        }
    }

    pub fn num_objects(&self) -> usize {
        self.object_categories.len()
    }

    pub fn num_predicates(&self) -> usize {
        self.predicate_categories.len()
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for (list, names) in [
            ("object", &self.object_categories),
            ("predicate", &self.predicate_categories),
        ] {
            if names.is_empty() {
                out.push(Violation::EmptyVocab(list));
            }
            let mut seen = HashSet::new();
            for n in names {
                if !seen.insert(n.as_str()) {
                    out.push(Violation::DuplicateName(n.clone()));
                }
            }
        }
        out
    }
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Option<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.is_valid().then_some(b)
    }

    pub fn is_valid(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        in_unit(self.x1)
            && in_unit(self.y1)
            && in_unit(self.x2)
            && in_unit(self.y2)
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

/// Intersection over union. Symmetric, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub category: usize,
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneGraph {
    pub entities: Vec<Entity>,
    pub triplets: Vec<Triplet>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Violation {
    #[error("{0} vocabulary is empty")]
    EmptyVocab(&'static str),
    #[error("duplicate vocabulary name {0:?}")]
    DuplicateName(String),
    #[error("entity {entity}: category {category} out of range")]
    CategoryOutOfRange { entity: usize, category: usize },
    #[error("entity {entity}: invalid box {bbox:?}")]
    InvalidBox { entity: usize, bbox: BBox },
    #[error("entity {entity}: confidence {confidence} outside [0, 1]")]
    Confidence { entity: usize, confidence: f64 },
    #[error("triplet {triplet}: entity index {index} out of range")]
    EntityIndex { triplet: usize, index: usize },
    #[error("triplet {triplet}: subject equals object")]
    SelfRelation { triplet: usize },
    #[error("triplet {triplet}: predicate {predicate} out of range")]
    PredicateOutOfRange { triplet: usize, predicate: usize },
    #[error("triplet {triplet}: score {score} is negative or not finite")]
    Score { triplet: usize, score: f64 },
    #[error("triplet {triplet}: pair ({subject}, {object}) already annotated")]
    DuplicatePair {
        triplet: usize,
        subject: usize,
        object: usize,
    },
}

/// Checks every invariant and reports all violations. With `ground_truth`
/// set, a second predicate on the same ordered pair is also a violation.
pub fn validate(graph: &SceneGraph, vocab: &Vocab, ground_truth: bool) -> Result<(), Vec<Violation>> {
    let mut out = vocab.violations();
    let n = graph.entities.len();
    for (k, e) in graph.entities.iter().enumerate() {
        if e.category >= vocab.num_objects() {
            out.push(Violation::CategoryOutOfRange {
                entity: k,
                category: e.category,
            });
        }
        if !e.bbox.is_valid() {
            out.push(Violation::InvalidBox {
                entity: k,
                bbox: e.bbox,
            });
        }
        if !(0.0..=1.0).contains(&e.confidence) {
            out.push(Violation::Confidence {
                entity: k,
                confidence: e.confidence,
            });
        }
    }
    let mut pairs = HashSet::new();
    for (k, t) in graph.triplets.iter().enumerate() {
        for index in [t.subject, t.object] {
            if index >= n {
                out.push(Violation::EntityIndex { triplet: k, index });
            }
        }
        if t.subject == t.object {
            out.push(Violation::SelfRelation { triplet: k });
        }
        if t.predicate >= vocab.num_predicates() {
            out.push(Violation::PredicateOutOfRange {
                triplet: k,
                predicate: t.predicate,
            });
        }
        if !(t.score >= 0.0 && t.score.is_finite()) {
            out.push(Violation::Score {
                triplet: k,
                score: t.score,
            });
        }
        if ground_truth && !pairs.insert((t.subject, t.object)) {
            out.push(Violation::DuplicatePair {
                triplet: k,
                subject: t.subject,
                object: t.object,
            });
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Descending score; equal scores fall back to ascending
/// `(subject, object, predicate)` so rankings are deterministic.
pub fn ranking_order(a: &Triplet, b: &Triplet) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.subject.cmp(&b.subject))
        .then(a.object.cmp(&b.object))
        .then(a.predicate.cmp(&b.predicate))
}

/// Returns the triplets sorted by [`ranking_order`].
pub fn rank_triplets(triplets: &[Triplet]) -> Vec<Triplet> {
    let mut out = triplets.to_vec();
    out.sort_by(ranking_order);
    out
}

/// Applies the graph constraint (first occurrence per ordered pair wins) to
/// an already ranked list, then keeps the first `k`.
pub fn top_k(ranked: &[Triplet], k: usize, constraint: bool) -> Vec<Triplet> {
    if !constraint {
        return ranked.iter().take(k).copied().collect();
    }
    let mut seen = HashSet::new();
    ranked
        .iter()
        .filter(|t| seen.insert((t.subject, t.object)))
        .take(k)
        .copied()
        .collect()
}

/// Matches ranked predictions against ground-truth triplets.
///
/// A prediction matches a truth triplet when the subject and object
/// categories and the predicate agree and both boxes overlap their truth
/// counterparts with IoU at least `iou_threshold`. Predictions are consumed
/// in order; each truth triplet is matched at most once. Under the graph
/// constraint only the first prediction per ordered entity pair takes part.
///
/// Returns a per-truth-triplet flag.
pub fn match_triplets(
    predicted_entities: &[Entity],
    ranked: &[Triplet],
    truth: &SceneGraph,
    iou_threshold: f64,
    constraint: bool,
) -> Vec<bool> {
    let mut matched = vec![false; truth.triplets.len()];
    let mut seen_pairs = HashSet::new();
    for p in ranked {
        if constraint && !seen_pairs.insert((p.subject, p.object)) {
            continue;
        }
        let (Some(ps), Some(po)) = (
            predicted_entities.get(p.subject),
            predicted_entities.get(p.object),
        ) else {
            continue;
        };
        for (k, t) in truth.triplets.iter().enumerate() {
            if matched[k] || t.predicate != p.predicate {
                continue;
            }
            let (ts, to) = (&truth.entities[t.subject], &truth.entities[t.object]);
            if ts.category == ps.category
                && to.category == po.category
                && iou(&ps.bbox, &ts.bbox) >= iou_threshold
                && iou(&po.bbox, &to.bbox) >= iou_threshold
            {
                matched[k] = true;
                break;
            }
        }
    }
    matched
}
