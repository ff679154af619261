//! Small end-to-end runs of the harness.

use std::fs;
use std::path::Path;
use std::time::Instant;

use sprint_core::harness::config::RunConfig;
use sprint_core::harness::io::read_samples;
use sprint_core::harness::{quadrant_accuracy, run_pipeline, run_with};
use sprint_core::train::TrainState;
use sprint_core::SprintError;

fn smoke(out: &Path) -> RunConfig {
    let text = format!(
        r#"
seed = 7
[model]
hidden = 16
heads = 2
[pretrain]
iterations = 30
batch_size = 4
[finetune]
iterations = 20
batch_size = 4
warmup = 5
[sample]
count = 8
steps = 5
[data]
dataset_size = 64
[ckpt]
every = 10
[io]
out_dir = "{}"
"#,
        out.display()
    );
    RunConfig::from_toml(&text).unwrap()
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn smoke_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(dir.path());
    let start = Instant::now();
    let summary = run_pipeline(&cfg).unwrap();
    assert!(start.elapsed().as_secs() < 60);

    let out = dir.path();
    for f in ["config.toml", "metrics.ndjson", "timings.ndjson", "pretrain.ckpt", "final.ckpt", "summary.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert_eq!(lines(&out.join("metrics.ndjson")), 50);
    assert!(out.join("ckpt/pretrain_000020.ckpt").exists());
    assert!(out.join("ckpt/finetune_000010.ckpt").exists());
    assert_eq!(RunConfig::load(&out.join("config.toml")).unwrap(), cfg);

    assert_eq!(summary.pretrain.as_ref().unwrap().iterations, 30);
    assert_eq!(summary.finetune.as_ref().unwrap().iterations, 20);
    assert_eq!(summary.sampling.len(), 3);
    let json = fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(!json.contains("\"ms\""), "summary must not carry timings");

    let pdg = summary.mode(sprint_core::sample::GuidanceMode::Pdg).unwrap();
    assert_eq!((pdg.full_passes, pdg.shallow_passes), (5, 5));
    let (images, labels) = read_samples(&out.join("samples/pdg")).unwrap();
    assert_eq!(labels, vec![0, 1, 2, 3, 0, 1, 2, 3]);
    assert_eq!(quadrant_accuracy(&images, &labels).unwrap(), pdg.accuracy);

    let state = TrainState::load(&out.join("final.ckpt")).unwrap();
    assert_eq!(state.iteration, 20);
    assert_eq!(state.adam_step, 50);
}

#[test]
fn absent_sections_skip_phases() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke(dir.path());
    cfg.finetune = None;
    cfg.sample = None;
    let s = run_pipeline(&cfg).unwrap();
    assert!(s.finetune.is_none() && s.sampling.is_empty());
    assert_eq!(lines(&dir.path().join("metrics.ndjson")), 30);
    assert!(dir.path().join("final.ckpt").exists());
    assert!(!dir.path().join("samples").exists());

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke(dir.path());
    cfg.pretrain = None;
    cfg.finetune = None;
    let s = run_pipeline(&cfg).unwrap();
    assert!(s.pretrain.is_none() && s.loss_ratio.is_none());
    assert_eq!(s.sampling.len(), 3);
    assert_eq!(lines(&dir.path().join("metrics.ndjson")), 0);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let full_dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke(full_dir.path());
    cfg.sample = None;
    run_pipeline(&cfg).unwrap();

    let part_dir = tempfile::tempdir().unwrap();
    let mut part = smoke(part_dir.path());
    part.sample = None;
    run_pipeline(&part).unwrap();
    // Restart from the mid-pretraining checkpoint, as after a crash.
    let state = TrainState::load(&part_dir.path().join("ckpt/pretrain_000020.ckpt")).unwrap();
    run_with(&part, Some(state), |_| {}).unwrap();

    for f in ["metrics.ndjson", "final.ckpt", "pretrain.ckpt"] {
        let a = fs::read(full_dir.path().join(f)).unwrap();
        let b = fs::read(part_dir.path().join(f)).unwrap();
        assert!(a == b, "{f} differs after resume");
    }
}

#[test]
fn resume_rejects_a_different_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke(dir.path());
    cfg.finetune = None;
    cfg.sample = None;
    run_pipeline(&cfg).unwrap();
    let state = TrainState::load(&dir.path().join("final.ckpt")).unwrap();
    let mut other = cfg.clone();
    other.model.hidden = 32;
    assert!(matches!(run_with(&other, Some(state.clone()), |_| {}), Err(SprintError::Config(_))));
    other = cfg.clone();
    other.seed += 1;
    assert!(run_with(&other, Some(state), |_| {}).is_err());
}

#[test]
fn divergence_dumps_state() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke(dir.path());
    cfg.sample = None;
    let pre = cfg.pretrain.as_mut().unwrap();
    pre.lr = 1e30;
    pre.lr_start = 1e30;
    pre.clip = 1e30;
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(matches!(err, SprintError::NonFiniteLoss { .. }), "{err}");
    assert!(dir.path().join("dump.ckpt").exists());
    let state = TrainState::load(&dir.path().join("dump.ckpt")).unwrap();
    assert_eq!(lines(&dir.path().join("metrics.ndjson")) as u64, state.iteration);
}
