//! Command-line front end: corpus generation, both training stages,
//! evaluation, numerical checks and ablation sweeps.

pub mod ablate;
pub mod checks;
pub mod config;
pub mod corpus;
pub mod error;
pub mod manifest;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use cmat::data::{self, generate, WorldOptions, WorldSpec};
use cmat::metrics::RewardSpec;
use cmat::model::{load_checkpoint, save_checkpoint};
use cmat::training::{evaluate, pretrain, train_rl, Logger, Task, TrainConfig};
use serde::Serialize;

use ablate::{run_ablation, Axis, Sweep};
use config::{load_config, parse_reward, Overrides, RlOverrides};
use corpus::Corpus;
use error::{CliError, Result};
use manifest::{verify_against_sibling_manifest, RunManifest};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";

#[derive(Debug, Parser)]
#[command(name = "cmat", version, about = "Counterfactual-critic multi-agent training for scene graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = corpus::DEFAULT_SCENES)]
        scenes: usize,
        #[arg(long, default_value_t = WorldOptions::default().num_classes)]
        classes: usize,
        #[arg(long, default_value_t = WorldOptions::default().num_predicates)]
        predicates: usize,
        #[arg(long, default_value_t = WorldOptions::default().mean_objects)]
        mean_objects: f64,
        #[arg(long, default_value_t = WorldOptions::default().corruption)]
        corruption: f64,
        #[arg(long, default_value_t = WorldOptions::default().seed)]
        seed: u64,
        /// TOML file with further world options.
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Stage 1: cross-entropy training.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Stage 2: policy-gradient fine-tuning from a stage-1 checkpoint.
    TrainRl {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        rl: RlOverrides,
    },
    /// Score a checkpoint on one split of a corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = TaskArg::Sgcls)]
        task: TaskArg,
        /// Comma-separated recall@K / spice@K list.
        #[arg(long, default_value = "recall@20,recall@50,spice@20")]
        metric: String,
        #[arg(long, value_enum, default_value_t = Switch::On)]
        constraint: Switch,
        #[arg(long, default_value = "test")]
        split: String,
        /// Line-delimited JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference gradient check and baseline-lemma residual.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest joint action count enumerated for the lemma check.
        #[arg(long, default_value_t = 4096)]
        max_joint: usize,
    },
    /// Sweep one axis over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        rl: RlOverrides,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Predcls,
    Sgcls,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Predcls => Task::PredCls,
            TaskArg::Sgcls => Task::SgCls,
        }
    }
}

fn prepare_out_dir(dir: &Path, guarded: &[&Path], force: bool) -> Result<()> {
    if !force {
        if let Some(p) = guarded.iter().find(|p| p.exists()) {
            return Err(CliError::Usage(format!("{} exists; pass --force to overwrite", p.display())));
        }
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(format!("creating {}", path.display()), e))
}

fn flush(w: &mut impl Write, path: &Path) -> Result<()> {
    w.flush().map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

pub fn run(cli: Cli, out: &mut impl Write) -> Result<()> {
    match cli.command {
        Command::GenData {
            out: dir,
            scenes,
            classes,
            predicates,
            mean_objects,
            corruption,
            seed,
            world,
            force,
        } => {
            if scenes == 0 {
                return Err(CliError::Usage("--scenes must be positive".into()));
            }
            let mut opts = match world {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| CliError::io(format!("reading {}", p.display()), e))?;
                    toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
                }
                None => WorldOptions::default(),
            };
            opts.num_classes = classes;
            opts.num_predicates = predicates;
            opts.mean_objects = mean_objects;
            opts.corruption = corruption;
            opts.seed = seed;
            gen_data(&dir, &opts, scenes, force, out)
        }
        Command::Pretrain {
            config,
            data,
            out: dir,
            force,
            overrides,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            overrides.apply(&mut cfg);
            run_pretrain(&cfg, &data, &dir, force, out)
        }
        Command::TrainRl {
            config,
            data,
            init,
            out: dir,
            force,
            overrides,
            rl,
        } => {
            let init = init.ok_or_else(|| CliError::Usage("train-rl needs --init <checkpoint>".into()))?;
            let mut cfg = load_config(config.as_deref())?;
            overrides.apply(&mut cfg);
            rl.apply(&mut cfg);
            run_train_rl(&cfg, &data, &init, &dir, force, out)
        }
        Command::Eval {
            ckpt,
            data,
            task,
            metric,
            constraint,
            split,
            report,
        } => {
            let specs = metric
                .split(',')
                .map(|m| parse_reward(m).map(|s| s.with_constraint(constraint == Switch::On)))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(CliError::Usage)?;
            run_eval(&ckpt, &data, task.into(), &specs, &split, report.as_deref(), out)
        }
        Command::Gradcheck { config, seed, max_joint } => {
            let cfg = load_config(config.as_deref())?;
            run_gradcheck(&cfg, seed, max_joint, out)
        }
        Command::Ablate {
            config,
            data,
            axis,
            seeds,
            out: dir,
            force,
            overrides,
            rl,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            overrides.apply(&mut cfg);
            rl.apply(&mut cfg);
            run_ablate(&cfg, &data, axis, seeds, &dir, force, out)
        }
    }
}

fn say(out: &mut impl Write, text: &str) -> Result<()> {
    writeln!(out, "{text}").map_err(|e| CliError::io("stdout", e))
}

pub fn gen_data(dir: &Path, opts: &WorldOptions, scenes: usize, force: bool, out: &mut impl Write) -> Result<()> {
    let scenes_path = corpus::scenes_path(dir);
    let vocab_path = corpus::vocab_path(dir);
    let world_path = dir.join(corpus::WORLD_FILE);
    prepare_out_dir(dir, &[&scenes_path], force)?;
    let world = WorldSpec::synthetic(opts)?;
    let manifest = RunManifest::begin("gen-data", opts, opts.seed, &[], &[&scenes_path, &vocab_path, &world_path])?;
    manifest.write(dir)?;

    let records = generate(&world, scenes)?;
    data::save(&records, &scenes_path)?;
    data::save_vocab(&world.vocab(), &vocab_path)?;
    let text = serde_json::to_string_pretty(&world).expect("world serializes");
    fs::write(&world_path, text + "\n").map_err(|e| CliError::io(format!("writing {}", world_path.display()), e))?;
    manifest.finish(dir)?;

    let rels: usize = records.iter().map(|r| r.truth.triplets.len()).sum();
    let ents: usize = records.iter().map(|r| r.num_entities()).sum();
    say(
        out,
        &format!(
            "wrote {scenes} scenes to {} ({:.2} entities, {:.2} relationships per scene)",
            scenes_path.display(),
            ents as f64 / scenes as f64,
            rels as f64 / scenes as f64
        ),
    )
}

struct RunFiles {
    ckpt: PathBuf,
    metrics: PathBuf,
    timing: PathBuf,
}

impl RunFiles {
    fn new(dir: &Path) -> Self {
        Self {
            ckpt: dir.join(CHECKPOINT_FILE),
            metrics: dir.join(METRICS_FILE),
            timing: dir.join(TIMING_FILE),
        }
    }
}

fn train_stage(
    command: &str,
    cfg: &TrainConfig,
    data_dir: &Path,
    extra_inputs: &[&Path],
    dir: &Path,
    force: bool,
    body: impl FnOnce(&Corpus, &mut Logger) -> Result<cmat::model::Checkpoint>,
) -> Result<f64> {
    cfg.check()?;
    let files = RunFiles::new(dir);
    prepare_out_dir(dir, &[&files.ckpt, &files.metrics], force)?;
    let [scenes, vocab] = Corpus::input_files(data_dir);
    let mut inputs: Vec<&Path> = vec![&scenes, &vocab];
    inputs.extend_from_slice(extra_inputs);
    let corpus = Corpus::load(data_dir)?;
    let feature = corpus.split.train.first().map_or(0, |r| r.features.first().map_or(0, Vec::len));
    cfg.dims(feature, corpus.vocab.object_categories.len(), corpus.vocab.predicate_categories.len())?;
    let manifest = RunManifest::begin(command, cfg, cfg.seed, &inputs, &[&files.ckpt, &files.metrics, &files.timing])?;
    manifest.write(dir)?;

    let mut metrics = create(&files.metrics)?;
    let mut timing = create(&files.timing)?;
    let mut logger = Logger {
        metrics: Some(&mut metrics),
        timing: Some(&mut timing),
        ..Logger::default()
    };
    let ckpt = body(&corpus, &mut logger)?;
    let last_val = logger.records.last().and_then(|r| r.val_recall).unwrap_or(f64::NAN);
    drop(logger);
    flush(&mut metrics, &files.metrics)?;
    flush(&mut timing, &files.timing)?;
    save_checkpoint(&files.ckpt, &ckpt)?;
    manifest.finish(dir)?;
    Ok(last_val)
}

pub fn run_pretrain(cfg: &TrainConfig, data_dir: &Path, dir: &Path, force: bool, out: &mut impl Write) -> Result<()> {
    let val = train_stage("pretrain", cfg, data_dir, &[], dir, force, |c, logger| {
        Ok(pretrain(cfg, &c.vocab, &c.split.train, &c.split.val, logger)?)
    })?;
    say(out, &format!("stage 1 done: validation recall@{} = {val:.4}; checkpoint in {}", cfg.reward.k, dir.display()))
}

pub fn run_train_rl(
    cfg: &TrainConfig,
    data_dir: &Path,
    init: &Path,
    dir: &Path,
    force: bool,
    out: &mut impl Write,
) -> Result<()> {
    if !init.exists() {
        return Err(CliError::Usage(format!("--init {} does not exist", init.display())));
    }
    verify_against_sibling_manifest(init)?;
    let start = load_checkpoint(init)?;
    let val = train_stage("train-rl", cfg, data_dir, &[init], dir, force, |c, logger| {
        Ok(train_rl(cfg, &c.vocab, Some(&start), &c.split.train, &c.split.val, logger)?)
    })?;
    say(
        out,
        &format!(
            "stage 2 ({} baseline, {} reward) done: validation recall@{} = {val:.4}; checkpoint in {}",
            cfg.baseline,
            cfg.reward,
            cfg.reward.k,
            dir.display()
        ),
    )
}

#[derive(Debug, Serialize)]
struct EvalLine<'a> {
    task: String,
    split: &'a str,
    metric: String,
    constraint: bool,
    value: f64,
    scenes: usize,
}

pub fn run_eval(
    ckpt_path: &Path,
    data_dir: &Path,
    task: Task,
    specs: &[RewardSpec],
    split: &str,
    report: Option<&Path>,
    out: &mut impl Write,
) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let corpus = Corpus::load(data_dir)?;
    let records = corpus.part(split)?;
    let values = evaluate(&ckpt.params, ckpt.steps, records, task, specs)?;
    let scored = records.iter().filter(|r| !r.truth.triplets.is_empty()).count();
    let lines: Vec<EvalLine> = specs
        .iter()
        .zip(&values)
        .map(|(s, &value)| EvalLine {
            task: task.to_string(),
            split,
            metric: s.to_string(),
            constraint: s.constraint,
            value,
            scenes: scored,
        })
        .collect();
    let constraint = if specs.first().is_some_and(|s| s.constraint) { "on" } else { "off" };
    say(out, &format!("{task} on {split} ({scored} scenes, graph constraint {constraint})"))?;
    for l in &lines {
        say(out, &format!("  {:<12} {:.4}", l.metric, l.value))?;
    }
    if let Some(path) = report {
        let mut w = create(path)?;
        for l in &lines {
            writeln!(w, "{}", serde_json::to_string(l).expect("report serializes"))
                .map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
        }
        flush(&mut w, path)?;
    }
    Ok(())
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const LEMMA_TOLERANCE: f64 = 1e-10;

pub fn run_gradcheck(cfg: &TrainConfig, seed: u64, max_joint: usize, out: &mut impl Write) -> Result<()> {
    cfg.check()?;
    let dims = checks::check_dims(cfg.hidden, cfg.embed, cfg.relation);
    let agents = 3;
    let grad = checks::model_gradcheck(dims, agents, cfg.steps, seed)?;
    say(
        out,
        &format!(
            "gradient check ({agents} agents, {} categories, {} predicates, T={}, {} coordinates): max relative error {:.3e} (analytic {:.6e}, numeric {:.6e} at coordinate {})",
            dims.num_classes, dims.num_predicates, cfg.steps, grad.coordinates, grad.max_relative_error, grad.worst_analytic, grad.worst_numeric, grad.worst_coordinate
        ),
    )?;
    let n = checks::enumerable_agents(agents, dims.num_classes, max_joint)?;
    if n < agents {
        say(out, &format!("note: {agents} agents exceed the enumeration cap {max_joint}; lemma checked with {n}"))?;
    }
    let lemma = checks::lemma_check(dims, n, cfg.steps, seed, max_joint)?;
    say(
        out,
        &format!(
            "baseline lemma ({} joint actions): residual norm {:.3e}, relative {:.3e}",
            lemma.joint_actions,
            lemma.norm,
            lemma.relative()
        ),
    )?;
    if !(grad.max_relative_error < GRADCHECK_TOLERANCE) {
        return Err(CliError::Numerical(format!(
            "gradient check failed: {:.3e} ≥ {GRADCHECK_TOLERANCE:e}",
            grad.max_relative_error
        )));
    }
    if !(lemma.relative() <= LEMMA_TOLERANCE) {
        return Err(CliError::Numerical(format!("baseline lemma residual {:.3e}", lemma.relative())));
    }
    Ok(())
}

pub fn run_ablate(
    cfg: &TrainConfig,
    data_dir: &Path,
    axis: Axis,
    seeds: usize,
    dir: &Path,
    force: bool,
    out: &mut impl Write,
) -> Result<()> {
    cfg.check()?;
    let runs_path = dir.join("runs.jsonl");
    let summary_path = dir.join("summary.txt");
    prepare_out_dir(dir, &[&runs_path, &summary_path], force)?;
    let [scenes, vocab] = Corpus::input_files(data_dir);
    #[derive(Serialize)]
    struct Snapshot<'a> {
        axis: Axis,
        seeds: usize,
        config: &'a TrainConfig,
    }
    let snapshot = Snapshot { axis, seeds, config: cfg };
    let manifest = RunManifest::begin("ablate", &snapshot, cfg.seed, &[&scenes, &vocab], &[&runs_path, &summary_path])?;
    manifest.write(dir)?;

    let corpus = Corpus::load(data_dir)?;
    let sweep = Sweep {
        vocab: &corpus.vocab,
        train: &corpus.split.train,
        val: &corpus.split.val,
    };
    let mut runs = create(&runs_path)?;
    let mut write_err = None;
    let table = run_ablation(cfg, &sweep, axis, seeds, |r| {
        let line = serde_json::to_string(r).expect("run record serializes");
        if let Err(e) = writeln!(runs, "{line}") {
            write_err.get_or_insert(e);
        }
        let _ = writeln!(out, "  seed {} {:<10} recall {:.4} spice {:.4}", r.seed, r.cell, r.recall, r.spice);
    })?;
    if let Some(e) = write_err {
        return Err(CliError::io(format!("writing {}", runs_path.display()), e));
    }
    flush(&mut runs, &runs_path)?;
    let rendered = table.render();
    fs::write(&summary_path, &rendered).map_err(|e| CliError::io(format!("writing {}", summary_path.display()), e))?;
    manifest.finish(dir)?;
    say(out, rendered.trim_end())
}
