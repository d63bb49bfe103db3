use std::path::Path;
use std::process::{Command, Output};

fn wog(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wog"))
        .args(args)
        .env("WOG_OUT", out)
        .output()
        .expect("binary runs")
}

const SMALL: &[&str] = &[
    "--dim", "16", "--heads", "2", "--dit-depth", "1", "--n-queries", "4", "--cond-dim", "8",
    "--set", "model.backbone_depth=1", "--set", "model.future_hidden=16", "--set", "model.future_heads=2",
    "--set", "model.future_blocks=1", "--set", "vision.embed_dim=8",
    "--n-demos", "2", "--batch-size", "4", "--n-trials", "2", "--seeds", "0",
];

fn run(out: &Path, args: &[&str]) -> Output {
    let mut all: Vec<&str> = args.to_vec();
    all.extend_from_slice(SMALL);
    let o = wog(out, &all);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn unknown_subcommand_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = wog(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = wog(dir.path(), &["gradcheck", "--trials", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("stage1_loss") && !text.contains("FAIL"));
    assert!(dir.path().join("manifest-gradcheck.json").exists());
}

#[test]
fn bad_config_fails_with_field_name() {
    let dir = tempfile::tempdir().unwrap();
    let o = wog(dir.path(), &["gen-data", "--horizon", "10"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("T must be divisible by 4"));
}

#[test]
fn pipeline_through_eval_and_probe() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(d, &["train-stage1", "--stage1-steps", "2"]);
    let s1 = d.join("stage1-seed0.wogck");
    assert!(s1.exists());

    // stage-I checkpoints are refused downstream
    let o = wog(d, &["finetune", "--init", s1.to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("requires stage-II init"));

    run(d, &["train-stage2", "--init", s1.to_str().unwrap(), "--stage2-steps", "2"]);
    let s2 = d.join("stage2-seed0.wogck");
    run(d, &["eval", "--checkpoint", s2.to_str().unwrap()]);
    let report = std::fs::read_to_string(d.join("eval-stage2-seed0.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 4);
    run(d, &["probe", "--checkpoint", s2.to_str().unwrap(), "--samples", "4"]);
    assert!(d.join("probe-stage2-seed0.json").exists());

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("manifest-eval.json")).unwrap()).unwrap();
    assert!(manifest.get("config").is_some() && manifest.get("seeds").is_some());
}

#[test]
fn ablate_writes_three_variant_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(d, &["ablate", "--stage1-steps", "1", "--stage2-steps", "1", "--set", "eval.setups=[\"id\"]"]);
    let table = std::fs::read_to_string(d.join("ablation.txt")).unwrap();
    for v in ["vanilla", "wog_wo_cotrain", "wog_full"] {
        assert!(table.contains(v), "{table}");
    }
    let rows = std::fs::read_to_string(d.join("ablation.jsonl")).unwrap();
    let steps: Vec<u64> = rows
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["optimizer_steps"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, vec![2, 2, 2]);
}
