mod common;

use std::process::Command;

use affectagent::cli::{
    cmd_suite, cmd_synth, cmd_train, Checkpoint, CheckpointKind, RunConfig, EVAL_CKPT, FINAL_CKPT, SFT_CKPT,
};
use common::*;

#[test]
fn train_and_eval_are_byte_reproducible() {
    let d = determinism(&tiny_config(30));
    assert!(d.checkpoint_identical);
    assert!(d.eval_checkpoint_identical);
    assert!(d.eval_report_identical);
}

#[test]
fn run_directory_feeds_the_suite() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let run = root.path().join("run");
    let mut cfg = tiny_config(31);
    cfg.out_dir = data.clone();
    let manifest = cmd_synth(&cfg).unwrap();
    assert_eq!(manifest.num_labels, 4);
    cfg.out_dir = run.clone();
    let summary = cmd_train(&cfg, &data).unwrap();
    assert_eq!(summary.config_hash, cfg.hash());

    let fin = Checkpoint::load(&run.join(FINAL_CKPT)).unwrap();
    assert_eq!(fin.header.kind, CheckpointKind::Train);
    assert_eq!(fin.header.iterations_done, cfg.train.iterations);
    assert!(fin.section("sft").is_some() && fin.section("velocity").is_some());
    let eval = Checkpoint::load(&run.join(EVAL_CKPT)).unwrap();
    assert!(eval.section("critic").is_none());
    let sft = Checkpoint::load(&run.join(SFT_CKPT))
        .unwrap()
        .to_bundle()
        .unwrap();
    assert_eq!(
        fin.to_bundle().unwrap().sft_view()[sft.actor_range()],
        sft.params[sft.actor_range()]
    );

    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), cfg.train.iterations);
    let saved = RunConfig::load(&run.join("config.json")).unwrap();
    assert_eq!(saved.hash(), cfg.hash());

    cfg.out_dir = root.path().join("suite");
    let a = cmd_suite(&cfg, &data, Some(&run)).unwrap();
    let b = cmd_suite(&cfg, &data, Some(&run)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.stepwise.len(), 4);
    assert_eq!(a.stepwise[0].delta_macro_f1, 0.0);
    assert_eq!(a.agents_and_evidence.len(), 6);
    let full = a.agents_and_evidence.last().unwrap();
    assert_eq!(full.name, "full");
    assert_eq!((full.delta_macro_f1, full.delta_weighted_f1), (0.0, 0.0));
    assert_eq!(a.missing_modality.len(), 3);
    assert_eq!(a.stepwise[3].macro_f1, full.macro_f1);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_affectagent"))
}

#[test]
fn binary_reports_errors_as_json() {
    let root = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["eval", "--checkpoint"])
        .arg(root.path().join("missing.ckpt"))
        .arg("--data")
        .arg(root.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "io");

    let bad = root.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let out = bin()
        .args(["eval", "--checkpoint"])
        .arg(&bad)
        .arg("--data")
        .arg(root.path())
        .output()
        .unwrap();
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "checkpoint");
}

#[test]
fn binary_synth_writes_a_manifest() {
    let root = tempfile::tempdir().unwrap();
    let cfg_path = root.path().join("cfg.json");
    tiny_config(0).save(&cfg_path).unwrap();
    let out = bin()
        .args(["synth", "--seed", "4", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(root.path().join("d"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(m["seed"], 4);
    assert!(root.path().join("d/manifest.json").exists());
}
