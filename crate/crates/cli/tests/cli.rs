use std::path::Path;
use std::process::{Command, Output};

fn tacmae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tacmae")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen_small(dir: &Path) {
    let out = tacmae(&["--seed", "3", "--out-dir", dir.to_str().unwrap(), "gen-data", "--classes", "3", "--per-class", "10"]);
    assert!(out.status.success(), "{}", stderr(&out));
}

fn tiny_model(dir: &Path) -> String {
    let path = dir.join("model.json");
    let cfg = serde_json::json!({
        "image_height": 32, "image_width": 32, "channels": 1, "patch_size": 8,
        "enc_dim": 16, "enc_depth": 1, "enc_heads": 2,
        "dec_dim": 8, "dec_depth": 1, "dec_heads": 2,
        "mlp_ratio": 2, "n_classes": 3
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = tacmae(&["train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--manifest"), "{}", stderr(&out));

    let out = tacmae(&["eval", "--manifest", "m.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--checkpoint"));
}

#[test]
fn bad_values_and_missing_subcommand_exit_with_one() {
    assert_eq!(tacmae(&[]).status.code(), Some(1));
    assert_eq!(tacmae(&["train", "--manifest", "m", "--variant", "bogus"]).status.code(), Some(1));
    assert_eq!(tacmae(&["train", "--manifest", "m", "--lr-schedule", "linear"]).status.code(), Some(1));
    assert_eq!(tacmae(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = tacmae(&["--out-dir", dir.path().to_str().unwrap(), "train", "--manifest", "/nonexistent/manifest.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("error"));
}

#[test]
fn ratio_sweep_prints_one_row_per_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_small(&data);
    let model = tiny_model(dir.path());
    let manifest = data.join("manifest.jsonl");
    let out_dir = dir.path().join("sweep");
    let out = tacmae(&[
        "--out-dir",
        out_dir.to_str().unwrap(),
        "sweep",
        "--manifest",
        manifest.to_str().unwrap(),
        "--ratios",
        "0.1:0.9:0.1",
        "--epochs",
        "1",
        "--probe-epochs",
        "2",
        "--model-config",
        &model,
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "ratio,zero_shot_acc,zero_shot_std,finetune_acc,finetune_std");
    assert_eq!(lines.len(), 10);
    for (line, r) in lines[1..].iter().zip(1..) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0], format!("0.{r}0"));
        for c in [1, 3] {
            let acc: f64 = cells[c].parse().unwrap();
            assert!((0.0..=1.0).contains(&acc));
        }
    }
    assert_eq!(std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap(), csv);
}

#[test]
fn train_then_inspect_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_small(&data);
    let model = tiny_model(dir.path());
    let manifest = data.join("manifest.jsonl");
    let run = dir.path().join("run");
    let out = tacmae(&[
        "--out-dir",
        run.to_str().unwrap(),
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--epochs",
        "2",
        "--model-config",
        &model,
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let ck = run.join("checkpoint.tmae");
    let ins = dir.path().join("inspect");
    let out = tacmae(&["--out-dir", ins.to_str().unwrap(), "inspect", "--checkpoint", ck.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["epoch"], 2);

    let ev = dir.path().join("eval");
    let out = tacmae(&[
        "--out-dir",
        ev.to_str().unwrap(),
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--probe-epochs",
        "3",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for file in ["zero_shot.json", "fine_tune.json"] {
        let report: serde_json::Value = serde_json::from_slice(&std::fs::read(ev.join(file)).unwrap()).unwrap();
        assert_eq!(report["n"], 3);
    }
}

#[test]
fn replay_rejects_an_extra_subcommand() {
    let out = tacmae(&["--replay", "run.json", "inspect", "--checkpoint", "x"]);
    assert_eq!(out.status.code(), Some(1));
}
