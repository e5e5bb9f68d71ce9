use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fedrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedrec"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn fedrec")
}

fn small_run(dir: &Path) -> Output {
    let out = format!("output.dir={:?}", dir.display().to_string());
    fedrec(&[
        "run",
        "--set",
        "data.synthetic.users=60",
        "--set",
        "data.synthetic.items=40",
        "--set",
        "data.synthetic.interactions=900",
        "--set",
        "model.dim=8",
        "--set",
        "model.towers=[8, 4]",
        "--set",
        "training.rounds=2",
        "--set",
        &out,
    ])
}

#[test]
fn run_then_eval_and_export() {
    let tmp = tempfile::tempdir().unwrap();
    let run = small_run(tmp.path());
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).contains("final epoch 2"));
    let ckpt = tmp.path().join("checkpoint_final.json");

    let eval = fedrec(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--k-hit", "5"]);
    assert_eq!(eval.status.code(), Some(0));
    let json: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(json["epoch"], 2);
    let hr = json["hr_at_5"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&hr));

    let csv = tmp.path().join("items.csv");
    let export = fedrec(&["export-embeddings", "--checkpoint", ckpt.to_str().unwrap(), "-o", csv.to_str().unwrap()]);
    assert_eq!(export.status.code(), Some(0));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 41);
}

#[test]
fn synth_writes_ratings() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("ratings.dat");
    let out = fedrec(&[
        "synth",
        "--users",
        "30",
        "--items",
        "20",
        "--interactions",
        "300",
        "-o",
        path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 300);
    assert_eq!(text.lines().next().unwrap().split("::").count(), 4);
}

#[test]
fn config_errors_exit_with_one() {
    let out = fedrec(&["run", "--set", "training.rouns=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rouns"));
    let out = fedrec(&["synth", "--users", "0", "-o", "/dev/null"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("absent.json");
    let out = fedrec(&["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
