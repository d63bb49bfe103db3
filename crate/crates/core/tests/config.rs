use std::io::Write;
use std::path::PathBuf;

use wog::config::{parse_config, RunConfig};
use wog::Error;

fn file(text: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(text.as_bytes()).unwrap();
    f
}

fn kv(k: &str, v: &str) -> (String, String) {
    (k.to_string(), v.to_string())
}

#[test]
fn empty_file_gives_defaults() {
    let f = file("");
    let cfg = parse_config(Some(f.path()), None, &[]).unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.horizon(), 16);
    assert_eq!(cfg.exec_horizon, 8);
    assert_eq!(cfg.stage1.steps, 5000);
    assert_eq!(cfg.stage2.steps, 3000);
    assert_eq!(cfg.stage1.batch_size, 32);
    assert_eq!(cfg.stage1.lr, 1e-3);
    assert_eq!(cfg.eval.n_trials, 50);
    assert_eq!(cfg.eval.max_steps, 80);
}

#[test]
fn horizon_must_divide_by_four() {
    let f = file("[model]\nhorizon = 10\n");
    let err = parse_config(Some(f.path()), None, &[]).unwrap_err();
    match &err {
        Error::Config { field, msg } => {
            assert_eq!(field, "model.horizon");
            assert!(msg.contains("T must be divisible by 4"), "{msg}");
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn flag_beats_file_beats_default() {
    let f = file("exec_horizon = 4\n[stage1]\nsteps = 7\nlr = 0.01\n");
    let cfg = parse_config(Some(f.path()), None, &[kv("stage1.steps", "9")]).unwrap();
    assert_eq!(cfg.stage1.steps, 9);
    assert_eq!(cfg.stage1.lr, 0.01);
    assert_eq!(cfg.exec_horizon, 4);
    assert_eq!(cfg.stage2.steps, 3000);
}

#[test]
fn out_dir_precedence() {
    let f = file("out_dir = \"from-file\"\n");
    let cfg = parse_config(Some(f.path()), Some("from-env"), &[]).unwrap();
    assert_eq!(cfg.out_dir, PathBuf::from("from-env"));
    let cfg = parse_config(Some(f.path()), Some("from-env"), &[kv("out_dir", "from-flag")]).unwrap();
    assert_eq!(cfg.out_dir, PathBuf::from("from-flag"));
    let cfg = parse_config(Some(f.path()), Some(""), &[]).unwrap();
    assert_eq!(cfg.out_dir, PathBuf::from("from-file"));
}

#[test]
fn unknown_keys_are_errors() {
    let f = file("[stage1]\nstepz = 3\n");
    assert!(parse_config(Some(f.path()), None, &[]).is_err());
    let f = file("colour = 1\n");
    assert!(parse_config(Some(f.path()), None, &[]).is_err());
    let err = parse_config(None, None, &[kv("model.depthh", "2")]).unwrap_err();
    assert!(err.to_string().contains("model.depthh"), "{err}");
}

#[test]
fn validation_names_the_field() {
    for (k, v, field) in [
        ("exec_horizon", "17", "exec_horizon"),
        ("model.heads", "3", "model.dim"),
        ("stage2.batch_size", "0", "stage2.batch_size"),
        ("data.label_fraction", "1.5", "data.label_fraction"),
    ] {
        match parse_config(None, None, &[kv(k, v)]) {
            Err(Error::Config { field: f, .. }) => assert_eq!(f, field, "{k}={v}"),
            other => panic!("{k}={v}: {other:?}"),
        }
    }
}

#[test]
fn kebab_keys_and_lists() {
    let cfg = parse_config(None, None, &[kv("exec-horizon", "4"), kv("tasks", "pick_place,close_door"), kv("eval.setups", "id,light")]).unwrap();
    assert_eq!(cfg.exec_horizon, 4);
    assert_eq!(cfg.tasks.len(), 2);
    assert_eq!(cfg.eval.setups.len(), 2);
}

#[test]
fn toml_round_trip() {
    let mut cfg = RunConfig::default();
    cfg.model.dim = 48;
    cfg.seeds = vec![4, 5];
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
}
