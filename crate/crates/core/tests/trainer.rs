use std::collections::BTreeMap;

use progrow::backbone::{build_backbone, grow, InputShape};
use progrow::data::{generate_synth_fusion, DatasetSplit, Samples, SynthFusionConfig};
use progrow::nn::{Module, ParamKind};
use progrow::optim::{LrDecay, OptimizerConfig};
use progrow::trainer::{resume_curriculum, run_stage, RunMode, RunOptions};
use progrow::{
    run_curriculum, run_paired, train_entire, BackboneSpec, Error, HeadKind, Preset, PrefixNetwork,
    ProgressiveSchedule, StagePlan,
};

fn spec() -> BackboneSpec {
    Preset::TinyResNet.spec_with_input(3, InputShape::square(3, 16)).unwrap()
}

fn data() -> DatasetSplit {
    generate_synth_fusion(&SynthFusionConfig {
        num_classes: 3,
        class_counts: vec![10, 8, 12],
        image_size: 16,
        gap_fraction_per_stage: vec![1.0, 0.5, 0.0],
        seed: 3,
        ..Default::default()
    })
    .unwrap()
}

fn schedule(sizes: &[usize], epochs: &[usize]) -> ProgressiveSchedule {
    let mut s = ProgressiveSchedule::new(StagePlan::from_sizes(sizes).unwrap(), epochs.to_vec());
    s.batch_size = 8;
    s.seed = 11;
    s.optimizer = OptimizerConfig::sgd(0.05);
    s
}

type Weights = BTreeMap<String, (ParamKind, Vec<f32>)>;

fn weights(net: &PrefixNetwork<f32>) -> Weights {
    let mut out = BTreeMap::new();
    net.visit("", &mut |n, p| {
        out.insert(n.to_string(), (p.kind, p.value.data().to_vec()));
    });
    out
}

fn trainable(w: &Weights) -> BTreeMap<String, Vec<f32>> {
    w.iter().filter(|(_, (k, _))| *k != ParamKind::Buffer).map(|(n, (_, v))| (n.clone(), v.clone())).collect()
}

fn subset(w: &Weights, prefix: &str) -> BTreeMap<String, Vec<f32>> {
    trainable(w).into_iter().filter(|(n, _)| n.starts_with(prefix)).collect()
}

#[test]
fn stage_one_touches_only_its_prefix() {
    let (spec, data) = (spec(), data());
    let sched = schedule(&[1, 1, 1, 1], &[2, 1, 1, 1]);
    let mut net = PrefixNetwork::new(&spec, &sched.plan, 1, HeadKind::Progressive, sched.seed).unwrap();
    let before = weights(&net);
    run_stage(&mut net, &data, &sched, 1, &RunOptions::default()).unwrap();
    let after = weights(&net);
    assert!(after.keys().all(|n| !n.starts_with("blocks.1") && !n.starts_with("blocks.2")));
    assert_ne!(subset(&before, "blocks.0"), subset(&after, "blocks.0"));

    // Blocks that were inactive come out of the grow step with their seeded initial weights.
    let fresh = build_backbone::<f32>(&spec, sched.seed).unwrap().into_full_network().unwrap();
    let grown = grow(net, HeadKind::Progressive, sched.seed).unwrap();
    assert_eq!(subset(&weights(&grown), "blocks.1"), subset(&weights(&fresh), "blocks.1"));
}

#[test]
fn earlier_blocks_keep_training_after_grow() {
    let (spec, data) = (spec(), data());
    let sched = schedule(&[2, 2], &[1, 2]);
    let mut net = PrefixNetwork::new(&spec, &sched.plan, 1, HeadKind::Progressive, sched.seed).unwrap();
    run_stage(&mut net, &data, &sched, 1, &RunOptions::default()).unwrap();
    let end_of_stage_one = weights(&net);
    let mut net = grow(net, HeadKind::Final, sched.seed).unwrap();
    assert_eq!(subset(&weights(&net), "stem"), subset(&end_of_stage_one, "stem"));
    assert_eq!(subset(&weights(&net), "blocks.0"), subset(&end_of_stage_one, "blocks.0"));
    let r = run_stage(&mut net, &data, &sched, 2, &RunOptions::default()).unwrap();
    assert_eq!(r.updated_parameter_count, net.trainable_param_count());
    let after = weights(&net);
    for prefix in ["stem", "blocks.0", "blocks.1"] {
        assert_ne!(subset(&after, prefix), subset(&end_of_stage_one, prefix), "{prefix} froze");
    }
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let (spec, data) = (spec(), data());
    let mut sched = schedule(&[4], &[1]);
    sched.optimizer = OptimizerConfig { lr: 0.0, weight_decay: 0.0, ..OptimizerConfig::sgd(0.0) };
    let mut net = PrefixNetwork::new(&spec, &sched.plan, 1, HeadKind::Final, sched.seed).unwrap();
    let before = trainable(&weights(&net));
    let r = run_stage(&mut net, &data, &sched, 1, &RunOptions::default()).unwrap();
    assert_eq!(r.epoch_logs.len(), 1);
    assert_eq!(trainable(&weights(&net)), before);
}

#[test]
fn zero_epoch_stage_is_a_noop() {
    let (spec, data) = (spec(), data());
    let sched = schedule(&[2, 2], &[0, 1]);
    let mut net = PrefixNetwork::new(&spec, &sched.plan, 1, HeadKind::Progressive, sched.seed).unwrap();
    let before = weights(&net);
    let r = run_stage(&mut net, &data, &sched, 1, &RunOptions::default()).unwrap();
    assert!(r.epoch_logs.is_empty());
    assert_eq!(weights(&net), before);
    let report = run_curriculum(&spec, &sched, &data, &RunOptions::default()).unwrap();
    assert_eq!(report.stages.len(), 2);
    assert_eq!(report.stages[1].epoch_logs[0].global_epoch, 0);
}

#[test]
fn single_stage_curriculum_matches_entire_training() {
    let (spec, data) = (spec(), data());
    let sched = schedule(&[4], &[2]);
    let prog = run_curriculum(&spec, &sched, &data, &RunOptions::default()).unwrap();
    let entire = train_entire(&spec, &schedule(&[2, 2], &[1, 1]), 2, &data, &RunOptions::default()).unwrap();
    assert_eq!(prog.mode, RunMode::Progressive);
    assert_eq!(entire.mode, RunMode::Entire);
    assert_eq!(prog.final_weights_hash, entire.final_weights_hash);
    assert_eq!(prog.test, entire.test);
    assert!(prog.notes.iter().any(|n| n.contains("equivalent")));
}

#[test]
fn runs_are_deterministic() {
    let (spec, data) = (spec(), data());
    let sched = schedule(&[2, 2], &[1, 1]);
    let mut a = run_curriculum(&spec, &sched, &data, &RunOptions::default()).unwrap();
    let mut b = run_curriculum(&spec, &sched, &data, &RunOptions::default()).unwrap();
    a.strip_timing();
    b.strip_timing();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}

#[test]
fn different_grow_seeds_differ_only_in_new_parts() {
    let (spec, data) = (spec(), data());
    let sched = schedule(&[2, 2], &[1, 1]);
    let mut net = PrefixNetwork::new(&spec, &sched.plan, 1, HeadKind::Progressive, sched.seed).unwrap();
    run_stage(&mut net, &data, &sched, 1, &RunOptions::default()).unwrap();
    let ckpt = progrow::checkpoint::Checkpoint::from_network(&net, 1);
    let copy: PrefixNetwork<f32> = ckpt.to_network().unwrap();
    let a = weights(&grow(net, HeadKind::Final, 1).unwrap());
    let b = weights(&grow(copy, HeadKind::Final, 2).unwrap());
    assert_eq!(subset(&a, "stem"), subset(&b, "stem"));
    assert_eq!(subset(&a, "blocks.1"), subset(&b, "blocks.1"));
    assert_ne!(subset(&a, "blocks.2"), subset(&b, "blocks.2"));
    assert_ne!(subset(&a, "fc"), subset(&b, "fc"));
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let (spec, data) = (spec(), data());
    let sched = schedule(&[1, 1, 2], &[1, 2, 1]);
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions { checkpoint_dir: Some(dir.path().to_path_buf()), ..Default::default() };
    let full = run_curriculum(&spec, &sched, &data, &opts).unwrap();
    assert!(dir.path().join("stage-3.ckpt").exists());
    let resumed = resume_curriculum(&spec, &sched, &data, &dir.path().join("stage-1.ckpt"), &RunOptions::default())
        .unwrap();
    assert_eq!(resumed.resumed_from_stage, Some(1));
    assert_eq!(resumed.stages.len(), 2);
    assert_eq!(resumed.stages[0].epoch_logs[0].global_epoch, 1);
    assert_eq!(resumed.final_weights_hash, full.final_weights_hash);

    let other = schedule(&[1, 1, 2], &[2, 1, 1]);
    let err = resume_curriculum(&spec, &other, &data, &dir.path().join("stage-1.ckpt"), &RunOptions::default())
        .unwrap_err();
    assert!(matches!(err.error, Error::CheckpointMismatch(_)));
}

#[test]
fn diverging_run_stops_with_partial_report() {
    let (spec, data) = (spec(), data());
    let mut sched = schedule(&[2, 2], &[1, 3]);
    sched.lr_schedule.decay = LrDecay::Constant;
    sched.optimizer = OptimizerConfig::sgd(1e30);
    let opts = RunOptions { skip_epoch_validation: true, ..Default::default() };
    let err = run_curriculum(&spec, &sched, &data, &opts).unwrap_err();
    assert!(matches!(err.error, Error::NonFiniteLoss { .. }), "{}", err.error);
    assert!(err.partial.final_weights_hash.is_none());
    assert!(err.partial.test.is_none());
}

#[test]
fn schedule_and_data_errors() {
    let (spec, data) = (spec(), data());
    let opts = RunOptions::default();
    let short = schedule(&[2, 2], &[1]);
    assert!(matches!(run_curriculum(&spec, &short, &data, &opts).unwrap_err().error, Error::InvalidSchedule(_)));
    let idle = schedule(&[2, 2], &[1, 0]);
    assert!(matches!(run_curriculum(&spec, &idle, &data, &opts).unwrap_err().error, Error::InvalidSchedule(_)));
    let wrong_plan = schedule(&[2, 3], &[1, 1]);
    assert!(matches!(run_curriculum(&spec, &wrong_plan, &data, &opts).unwrap_err().error, Error::InvalidPlan(_)));

    let sched = schedule(&[4], &[1]);
    let mut empty = data.clone();
    empty.train = Samples::new(1, 16, 16);
    assert!(matches!(run_curriculum(&spec, &sched, &empty, &opts).unwrap_err().error, Error::EmptyDataset(_)));

    let four = Preset::TinyResNet.spec_with_input(4, InputShape::square(3, 16)).unwrap();
    assert!(matches!(run_curriculum(&four, &sched, &data, &opts).unwrap_err().error, Error::Data(_)));

    let paired = schedule(&[2, 2], &[1, 1]);
    assert!(matches!(run_paired(&spec, &paired, 3, &data, &opts).unwrap_err().error, Error::InvalidSchedule(_)));
}

#[test]
fn untrained_entire_model_is_evaluated() {
    let (spec, data) = (spec(), data());
    let r = train_entire(&spec, &schedule(&[4], &[1]), 0, &data, &RunOptions::default()).unwrap();
    assert!(r.stages[0].epoch_logs.is_empty());
    let t = r.test.unwrap();
    assert_eq!(t.sample_count as usize, data.test.len());
}

#[test]
fn paired_rows_carry_computation_only_for_progressive() {
    let (spec, data) = (spec(), data());
    let sched = schedule(&[1, 3], &[1, 1]);
    let p = run_paired(&spec, &sched, 2, &data, &RunOptions::default()).unwrap();
    assert_eq!(p.rows.len(), 2);
    assert!(p.rows[0].overall_computation.is_none());
    let c = p.rows[1].overall_computation.unwrap();
    assert!(c > 0.0 && c < 1.0, "{c}");
    assert_eq!(p.entire.schedule.epochs, vec![2]);
}
