//! On-disk corpus layout: a directory holding `scenes.jsonl`, `vocab.json`
//! and the `world.json` it was generated from.

use std::path::{Path, PathBuf};

use cmat::data::{self, generate, split, SceneRecord, Split, WorldOptions, WorldSpec};
use cmat::graph::Vocab;

use crate::error::{CliError, Result};

pub const SCENES_FILE: &str = "scenes.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const WORLD_FILE: &str = "world.json";

/// Train / validation / test fractions applied to every corpus.
pub const SPLIT_FRACTIONS: [f64; 3] = [0.5, 0.25, 0.25];
pub const SPLIT_SEED: u64 = 0;
/// Corpus size written by `gen-data` unless overridden.
pub const DEFAULT_SCENES: usize = 4000;

#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocab,
    pub split: Split,
}

pub fn scenes_path(dir: &Path) -> PathBuf {
    dir.join(SCENES_FILE)
}

pub fn vocab_path(dir: &Path) -> PathBuf {
    dir.join(VOCAB_FILE)
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("{} is not a corpus directory", dir.display())));
        }
        let vocab = data::load_vocab(&vocab_path(dir))?;
        let records = data::load(&scenes_path(dir), &vocab)?;
        Ok(Self {
            split: split(&records, SPLIT_FRACTIONS, SPLIT_SEED)?,
            vocab,
        })
    }

    /// The corpus `gen-data` would write for these options, built in memory.
    pub fn synthetic(opts: &WorldOptions, scenes: usize) -> Result<Self> {
        let world = WorldSpec::synthetic(opts)?;
        let records = generate(&world, scenes)?;
        Ok(Self {
            vocab: world.vocab(),
            split: split(&records, SPLIT_FRACTIONS, SPLIT_SEED)?,
        })
    }

    pub fn part(&self, name: &str) -> Result<&[SceneRecord]> {
        match name {
            "train" => Ok(&self.split.train),
            "val" => Ok(&self.split.val),
            "test" => Ok(&self.split.test),
            _ => Err(CliError::Usage(format!("unknown split {name:?}; expected train, val or test"))),
        }
    }

    pub fn input_files(dir: &Path) -> [PathBuf; 2] {
        [scenes_path(dir), vocab_path(dir)]
    }
}
