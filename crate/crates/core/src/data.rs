//! Synthetic contextual scenes standing in for detector outputs, plus
//! line-delimited JSON serialization.
//!
//! Categories within a scene are correlated through a co-occurrence table,
//! predicates are drawn from a table conditioned on the (subject, object)
//! category pair, entity features are noisy per-category prototypes, and
//! initial logits are a corrupted one-hot of the true category. Independent
//! classification is therefore imperfect, and context carries information
//! that communication can exploit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{validate, BBox, Entity, SceneGraph, Triplet, Vocab};
use crate::model::{ordered_pairs, SceneInput};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("world spec: {0}")]
    Spec(String),
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Generative description of the synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub num_classes: usize,
    pub num_predicates: usize,
    pub feature_dim: usize,
    /// `cooccurrence[a][b]`: probability that a new entity has category `b`
    /// given an anchor entity of category `a`. Row and column 0 (background)
    /// are unused.
    pub cooccurrence: Vec<Vec<f64>>,
    /// `predicate_given_pair[a * C + b]`: predicate distribution for an
    /// ordered pair with categories `(a, b)`; entry 0 is no relationship.
    pub predicate_given_pair: Vec<Vec<f64>>,
    pub mean_objects: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Categories in the same group share a base prototype; each adds its
    /// own offset scaled by `group_spread`.
    pub prototype_group: Vec<usize>,
    pub group_spread: f64,
    pub feature_noise: f64,
    pub pair_noise: f64,
    pub corruption: f64,
    pub logit_scale: f64,
    pub seed: u64,
}

/// Knobs for [`WorldSpec::synthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldOptions {
    pub num_classes: usize,
    pub num_predicates: usize,
    pub feature_dim: usize,
    pub mean_objects: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub feature_noise: f64,
    pub pair_noise: f64,
    pub corruption: f64,
    /// Expected annotated relationships per ordered pair.
    pub relation_rate: f64,
    /// Number of strongly associated partners per category.
    pub partners: usize,
    /// Relationship propensity of even-numbered categories relative to
    /// odd-numbered ones. Consecutive categories `(2k-1, 2k)` are twins with
    /// nearby prototypes, so a low value pairs each relationship-heavy
    /// category with a look-alike that rarely takes part in relationships.
    pub loner_propensity: f64,
    /// Distance scale between twin prototypes.
    pub twin_spread: f64,
    pub seed: u64,
}

impl Default for WorldOptions {
    fn default() -> Self {
        Self {
            num_classes: 13,
            num_predicates: 7,
            feature_dim: 12,
            mean_objects: 6.0,
            min_objects: 2,
            max_objects: 10,
            feature_noise: 1.4,
            pair_noise: 0.8,
            corruption: 0.5,
            relation_rate: 0.5,
            partners: 2,
            loner_propensity: 0.0,
            twin_spread: 0.3,
            seed: 7,
        }
    }
}

fn normalize(row: &mut [f64]) {
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= total);
}

impl WorldSpec {
    /// Random tables with sparse, peaked structure drawn from `opts.seed`.
    pub fn synthetic(opts: &WorldOptions) -> Result<Self> {
        let (c, r) = (opts.num_classes, opts.num_predicates);
        if c < 3 || r < 2 {
            return Err(DataError::Spec(format!(
                "need at least 3 object and 2 predicate categories, got {c} and {r}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_7ab1e5);
        let fg: Vec<usize> = (1..c).collect();

        let mut cooccurrence = vec![vec![0.0; c]; c];
        for a in 1..c {
            let row = &mut cooccurrence[a];
            for &b in &fg {
                row[b] = 0.05;
            }
            row[a] += 0.5;
            for &b in fg.choose_multiple(&mut rng, opts.partners.min(c - 1)) {
                row[b] += 2.0;
            }
            normalize(row);
        }

        let mut predicate_given_pair = vec![vec![0.0; r]; c * c];
        for a in 1..c {
            for b in 1..c {
                let row = &mut predicate_given_pair[a * c + b];
                // pairs of associated categories interact more often
                let affinity = cooccurrence[a][b] + cooccurrence[b][a];
                let propensity = |v: usize| if v % 2 == 1 { 1.0 } else { opts.loner_propensity };
                let rate = (opts.relation_rate * (0.5 + 2.0 * affinity) * propensity(a) * propensity(b)).min(0.9);
                let favourite = rng.gen_range(1..r);
                let mut weights: Vec<f64> = (1..r).map(|_| 0.1 * rng.gen::<f64>()).collect();
                weights[favourite - 1] += 1.0;
                normalize(&mut weights);
                row[0] = 1.0 - rate;
                for p in 1..r {
                    row[p] = rate * weights[p - 1];
                }
            }
        }
        for row in predicate_given_pair.iter_mut() {
            if row.iter().all(|&v| v == 0.0) {
                row[0] = 1.0;
            }
        }

        let spec = Self {
            num_classes: c,
            num_predicates: r,
            feature_dim: opts.feature_dim,
            cooccurrence,
            predicate_given_pair,
            mean_objects: opts.mean_objects,
            prototype_group: (0..c).map(|v| (v + 1) / 2).collect(),
            group_spread: opts.twin_spread,
            min_objects: opts.min_objects,
            max_objects: opts.max_objects,
            feature_noise: opts.feature_noise,
            pair_noise: opts.pair_noise,
            corruption: opts.corruption,
            logit_scale: 2.0,
            seed: opts.seed,
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::synthetic(self.num_classes, self.num_predicates)
    }

    pub fn check(&self) -> Result<()> {
        let (c, r) = (self.num_classes, self.num_predicates);
        let err = |m: String| Err(DataError::Spec(m));
        if c < 2 || r < 2 {
            return err(format!("vocab sizes must be at least 2, got {c} and {r}"));
        }
        if self.prototype_group.len() != c || !(self.group_spread >= 0.0) {
            return err(format!("prototype groups must list {c} categories with a non-negative spread"));
        }
        if self.feature_dim == 0 {
            return err("feature_dim must be positive".into());
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return err(format!(
                "object count range [{}, {}] is empty",
                self.min_objects, self.max_objects
            ));
        }
        if !(self.mean_objects >= self.min_objects as f64 && self.mean_objects <= self.max_objects as f64) {
            return err(format!("mean_objects {} outside the count range", self.mean_objects));
        }
        if !(0.0..=1.0).contains(&self.corruption) || self.feature_noise < 0.0 || self.pair_noise < 0.0 {
            return err("noise levels must be non-negative and corruption within [0, 1]".into());
        }
        let row_ok = |row: &[f64], len: usize| {
            row.len() == len
                && row.iter().all(|v| v.is_finite() && *v >= 0.0)
                && (row.iter().sum::<f64>() - 1.0).abs() < 1e-9
        };
        if self.cooccurrence.len() != c {
            return err(format!("co-occurrence table has {} rows", self.cooccurrence.len()));
        }
        for (a, row) in self.cooccurrence.iter().enumerate().skip(1) {
            if !row_ok(row, c) || row[0] != 0.0 {
                return err(format!("co-occurrence row {a} is not a distribution over foreground categories"));
            }
        }
        if self.predicate_given_pair.len() != c * c {
            return err(format!(
                "predicate table has {} rows, expected {}",
                self.predicate_given_pair.len(),
                c * c
            ));
        }
        for (k, row) in self.predicate_given_pair.iter().enumerate() {
            if (k / c == 0 || k % c == 0) && row.iter().all(|&v| v == 0.0) {
                continue;
            }
            if !row_ok(row, r) {
                return err(format!("predicate row {k} is not a distribution"));
            }
        }
        Ok(())
    }
}

/// One synthetic scene: detector-style inputs plus ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: u64,
    pub truth: SceneGraph,
    pub features: Vec<Vec<f64>>,
    pub init_logits: Vec<Vec<f64>>,
    /// Ordered-pair features in subject-major order.
    pub pair_features: Vec<Vec<f64>>,
}

impl SceneRecord {
    pub fn num_entities(&self) -> usize {
        self.truth.entities.len()
    }

    pub fn input(&self) -> SceneInput {
        SceneInput {
            features: self.features.clone(),
            init_logits: self.init_logits.clone(),
            pair_features: self.pair_features.clone(),
        }
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.truth.entities.iter().map(|e| e.bbox).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.truth.entities.iter().map(|e| e.category).collect()
    }

    /// Ground-truth predicate for every ordered pair (0 where unannotated).
    pub fn pair_labels(&self) -> Vec<usize> {
        let n = self.num_entities();
        let mut out = vec![0; n * n.saturating_sub(1)];
        for t in &self.truth.triplets {
            out[crate::model::pair_index(n, t.subject, t.object)] = t.predicate;
        }
        out
    }

    pub fn check(&self, vocab: &Vocab, feature_dim: Option<usize>) -> std::result::Result<(), String> {
        validate(&self.truth, vocab, true).map_err(|v| {
            v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
        })?;
        let n = self.num_entities();
        if n == 0 {
            return Err("scene has no entities".into());
        }
        if self.features.len() != n || self.init_logits.len() != n {
            return Err(format!("{n} entities but {} features and {} logit rows", self.features.len(), self.init_logits.len()));
        }
        if self.pair_features.len() != n * (n - 1) {
            return Err(format!("{} pair features for {n} entities", self.pair_features.len()));
        }
        if let Some(t) = self.truth.triplets.iter().find(|t| t.predicate == 0) {
            return Err(format!("triplet ({}, {}) uses the no-relationship predicate", t.subject, t.object));
        }
        let d = feature_dim.unwrap_or_else(|| self.features[0].len());
        let finite = |rows: &[Vec<f64>], len: usize| rows.iter().all(|r| r.len() == len && r.iter().all(|v| v.is_finite()));
        if !finite(&self.features, d) || !finite(&self.pair_features, d) {
            return Err(format!("features must be finite {d}-vectors"));
        }
        if !finite(&self.init_logits, vocab.num_objects()) {
            return Err(format!("initial logits must be finite {}-vectors", vocab.num_objects()));
        }
        Ok(())
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller; u1 in (0, 1]
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn poisson<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> usize {
    let limit = (-lambda).exp();
    let mut k = 0;
    let mut p: f64 = rng.gen();
    while p > limit {
        k += 1;
        p *= rng.gen::<f64>();
    }
    k
}

fn draw<R: Rng + ?Sized>(rng: &mut R, p: &[f64]) -> usize {
    crate::model::sample_category(p, rng)
}

/// Seeded scene generator.
pub fn generate(world: &WorldSpec, count: usize) -> Result<Vec<SceneRecord>> {
    world.check()?;
    let (c, d) = (world.num_classes, world.feature_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(world.seed);
    let mut proto = |rows: usize| -> Vec<Vec<f64>> {
        (0..rows).map(|_| (0..d).map(|_| gaussian(&mut rng)).collect()).collect()
    };
    let groups = proto(world.prototype_group.iter().max().map_or(0, |g| g + 1));
    let entity_proto: Vec<Vec<f64>> = proto(c)
        .into_iter()
        .zip(&world.prototype_group)
        .map(|(own, &g)| {
            own.iter()
                .zip(&groups[g])
                .map(|(o, b)| b + world.group_spread * o)
                .collect()
        })
        .collect();
    let predicate_proto = proto(world.num_predicates);

    let mut scenes = Vec::with_capacity(count);
    for id in 0..count as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(world.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ id.wrapping_add(1));
        let extra = poisson(&mut rng, world.mean_objects - world.min_objects as f64);
        let n = (world.min_objects + extra).min(world.max_objects);

        let mut cats = Vec::with_capacity(n);
        cats.push(rng.gen_range(1..c));
        while cats.len() < n {
            let anchor = cats[rng.gen_range(0..cats.len())];
            cats.push(draw(&mut rng, &world.cooccurrence[anchor]));
        }

        let mut entities = Vec::with_capacity(n);
        let mut features = Vec::with_capacity(n);
        let mut init_logits = Vec::with_capacity(n);
        for &cat in &cats {
            let w = rng.gen_range(0.1..0.4);
            let h = rng.gen_range(0.1..0.4);
            let x = rng.gen_range(0.0..1.0 - w);
            let y = rng.gen_range(0.0..1.0 - h);
            entities.push(Entity {
                category: cat,
                bbox: BBox { x1: x, y1: y, x2: x + w, y2: y + h },
                confidence: 1.0,
            });
            features.push(
                entity_proto[cat]
                    .iter()
                    .map(|p| p + world.feature_noise * gaussian(&mut rng))
                    .collect::<Vec<f64>>(),
            );
            let label = if rng.gen::<f64>() < world.corruption {
                let wrong = rng.gen_range(1..c - 1);
                if wrong >= cat { wrong + 1 } else { wrong }
            } else {
                cat
            };
            let mut logits = vec![0.0; c];
            logits[label] = world.logit_scale;
            init_logits.push(logits);
        }

        let mut triplets = Vec::new();
        let mut pair_features = Vec::with_capacity(n * n.saturating_sub(1));
        for (i, j) in ordered_pairs(n) {
            let pred = draw(&mut rng, &world.predicate_given_pair[cats[i] * c + cats[j]]);
            if pred > 0 {
                triplets.push(Triplet {
                    subject: i,
                    object: j,
                    predicate: pred,
                    score: 1.0,
                });
            }
            pair_features.push(
                predicate_proto[pred]
                    .iter()
                    .map(|p| p + world.pair_noise * gaussian(&mut rng))
                    .collect::<Vec<f64>>(),
            );
        }

        scenes.push(SceneRecord {
            id,
            truth: SceneGraph { entities, triplets },
            features,
            init_logits,
            pair_features,
        });
    }
    Ok(scenes)
}

pub fn write_records<W: Write>(mut w: W, records: &[SceneRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save(records: &[SceneRecord], path: &Path) -> Result<()> {
    write_records(BufWriter::new(File::create(path)?), records)
}

/// Parses and validates one record per line; errors name the 1-based line.
pub fn read_records<R: BufRead>(reader: R, vocab: &Vocab) -> Result<Vec<SceneRecord>> {
    let mut out = Vec::new();
    let mut feature_dim = None;
    for (k, line) in reader.lines().enumerate() {
        let line_no = k + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SceneRecord = serde_json::from_str(&line).map_err(|e| DataError::Line {
            line: line_no,
            message: e.to_string(),
        })?;
        record
            .check(vocab, feature_dim)
            .map_err(|message| DataError::Line { line: line_no, message })?;
        feature_dim.get_or_insert(record.features[0].len());
        out.push(record);
    }
    Ok(out)
}

pub fn load(path: &Path, vocab: &Vocab) -> Result<Vec<SceneRecord>> {
    read_records(BufReader::new(File::open(path)?), vocab)
}

pub fn save_vocab(vocab: &Vocab, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, vocab)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let vocab: Vocab = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let problems = vocab.violations();
    if !problems.is_empty() {
        return Err(DataError::Invalid(format!("vocab: {problems:?}")));
    }
    Ok(vocab)
}

/// Train / validation / test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<SceneRecord>,
    pub val: Vec<SceneRecord>,
    pub test: Vec<SceneRecord>,
}

/// Seeded shuffle and cut by `fractions`; each part keeps ascending id order.
pub fn split(records: &[SceneRecord], fractions: [f64; 3], seed: u64) -> Result<Split> {
    if records.is_empty() {
        return Err(DataError::Invalid("cannot split an empty record list".into()));
    }
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::Invalid(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let take = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|k| records[k].clone()).collect::<Vec<_>>()
    };
    Ok(Split {
        train: take(&order[..n_train]),
        val: take(&order[n_train..n_train + n_val]),
        test: take(&order[n_train + n_val..]),
    })
}
