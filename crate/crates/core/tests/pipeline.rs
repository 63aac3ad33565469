use cmat::data::{generate, read_records, split, write_records, WorldOptions, WorldSpec};
use cmat::metrics::RewardSpec;
use cmat::model::{read_checkpoint, write_checkpoint, ModelParameters};
use cmat::training::{evaluate, pretrain, train, Baseline, Logger, Task, TrainConfig};

fn world() -> WorldOptions {
    WorldOptions {
        num_classes: 7,
        num_predicates: 4,
        feature_dim: 6,
        mean_objects: 4.0,
        max_objects: 6,
        ..WorldOptions::default()
    }
}

fn config() -> TrainConfig {
    TrainConfig {
        hidden: 8,
        embed: 4,
        relation: 4,
        batch_size: 8,
        pretrain_iters: 150,
        rl_iters: 20,
        alpha: 0.05,
        baseline: Baseline::Cf,
        ..TrainConfig::default()
    }
}

#[test]
fn corpus_round_trips_through_jsonl() {
    let spec = WorldSpec::synthetic(&world()).unwrap();
    let records = generate(&spec, 40).unwrap();
    let mut buf = Vec::new();
    write_records(&mut buf, &records).unwrap();
    let back = read_records(buf.as_slice(), &spec.vocab()).unwrap();
    assert_eq!(back, records);
}

#[test]
fn train_save_load_evaluate() {
    let spec = WorldSpec::synthetic(&world()).unwrap();
    let records = generate(&spec, 240).unwrap();
    let parts = split(&records, [0.5, 0.25, 0.25], 0).unwrap();
    let cfg = config();
    let specs = [RewardSpec::recall(20), RewardSpec::spice(20)];

    let (xe, rl) = train(&cfg, &spec.vocab(), &parts.train, &parts.val, &mut Logger::default()).unwrap();
    assert_eq!(rl.steps, cfg.steps);

    let init = ModelParameters::init(*xe.params.dims(), cfg.seed);
    let before = evaluate(&init, cfg.steps, &parts.test, Task::SgCls, &specs).unwrap();
    let after = evaluate(&xe.params, cfg.steps, &parts.test, Task::SgCls, &specs).unwrap();
    assert!(after[0] > before[0], "pretraining should raise recall: {before:?} -> {after:?}");

    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &rl).unwrap();
    let loaded = read_checkpoint(bytes.as_slice()).unwrap();
    assert_eq!(loaded, rl);
    let a = evaluate(&rl.params, rl.steps, &parts.test, Task::SgCls, &specs).unwrap();
    let b = evaluate(&loaded.params, loaded.steps, &parts.test, Task::SgCls, &specs).unwrap();
    assert_eq!(a, b);
    for v in a.iter().chain(&b) {
        assert!((0.0..=1.0).contains(v));
    }
}

#[test]
fn predcls_is_at_least_sgcls_after_pretraining() {
    let spec = WorldSpec::synthetic(&world()).unwrap();
    let records = generate(&spec, 240).unwrap();
    let parts = split(&records, [0.5, 0.25, 0.25], 0).unwrap();
    let cfg = config();
    let xe = pretrain(&cfg, &spec.vocab(), &parts.train, &[], &mut Logger::default()).unwrap();
    let specs = [RewardSpec::recall(50)];
    let sg = evaluate(&xe.params, cfg.steps, &parts.test, Task::SgCls, &specs).unwrap();
    let pred = evaluate(&xe.params, cfg.steps, &parts.test, Task::PredCls, &specs).unwrap();
    assert!(pred[0] >= sg[0], "predcls {pred:?} < sgcls {sg:?}");
}
