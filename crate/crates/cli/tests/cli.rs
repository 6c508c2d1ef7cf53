use std::path::Path;
use std::process::{Command, Output};

fn stslab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stslab")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn budget_reports_k400_fixed_schedule() {
    let o = stslab(&["budget", "--dataset", "k400", "--frames", "8", "--mode", "fixed", "--baseline-epochs", "100"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("x1.16"), "{}", stdout(&o));
    let o = stslab(&["--json", "budget", "--frames", "32", "--mode", "sota"]);
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["multiplier"], "x0.39");
    assert_eq!(v["plan"]["pretrain_epochs"], 300);
}

#[test]
fn budget_reads_a_custom_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("d.json");
    std::fs::write(&file, r#"{"name":"tiny","instances":1000,"frames_per_instance":10}"#).unwrap();
    let o = stslab(&["budget", "--dataset", "custom", "--dataset-file", path(&file), "--frames", "4", "--pretrain-epochs", "0"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("multiplier x0.5"), "{}", stdout(&o));
    assert_eq!(stslab(&["budget", "--dataset", "custom", "--frames", "4"]).status.code(), Some(1));
}

#[test]
fn rf_prints_table_and_single_layers() {
    let o = stslab(&["rf"]);
    let text = stdout(&o);
    assert!(text.contains("3x3+5x5") && text.contains("3x3+7x7") && text.contains("1x9+3x3+9x1"), "{text}");
    assert_eq!(stdout(&stslab(&["rf", "--layer", "dilated:3,2"])).trim(), "3x3+5x5");
    let stacked = stdout(&stslab(&["rf", "--layer", "conv:3", "--layer", "conv:3"]));
    assert!(stacked.trim_end().ends_with("stack 5x5"), "{stacked}");
}

#[test]
fn gradcheck_passes_and_reports_json() {
    let o = stslab(&["--json", "gradcheck", "--op", "conv2d,sts", "--instances", "2"]);
    assert!(o.status.success());
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines.iter().all(|l| l["pass"] == true && l["max_rel_err"].as_f64().unwrap() < 1e-6));
}

#[test]
fn gradcheck_sts_in_f64_meets_tolerance() {
    let o = stslab(&["gradcheck", "--op", "sts", "--dtype", "f64", "--instances", "2"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("max_rel_err < 1e-6"), "{}", stdout(&o));
}

#[test]
fn gradcheck_fails_with_impossible_tolerance() {
    let o = stslab(&["gradcheck", "--op", "conv1d", "--instances", "1", "--tol", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(stslab(&["rf", "--layer", "conv:x"]).status.code(), Some(2));
    assert_eq!(stslab(&["gradcheck", "--op", "conv4d"]).status.code(), Some(2));
    assert_eq!(stslab(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn train_convert_probe_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = |f: &str| dir.path().join(f);
    let small = ["--width", "2", "--n", "24", "--val", "12", "--shapes", "2", "--motions", "2", "--batch-size", "8"];

    let mut args = vec!["train", "--variant", "2d", "--task", "shape", "--epochs", "1", "--save"];
    let ckpt2d = d("2d.ckpt");
    args.push(path(&ckpt2d));
    args.extend(small);
    let o = stslab(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let records: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 4);
    assert_eq!(records[3]["split"], "val");

    let (ckpt3d, spec3d) = (d("3d.ckpt"), d("3d.json"));
    let o = stslab(&[
        "convert", "--checkpoint", path(&ckpt2d), "--width", "2", "--init", "sts-2d", "--out", path(&ckpt3d), "--out-spec", path(&spec3d),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    for t in ["0", "1", "2"] {
        let out = d(&format!("p{t}.ckpt"));
        let o = stslab(&["probe", "--spec", path(&spec3d), "--checkpoint", path(&ckpt3d), "--t", t, "--out", path(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(out.exists());
    }

    let mut args = vec!["train", "--epochs", "1", "--init", "sts-2d", "--load"];
    args.push(path(&ckpt2d));
    args.extend(small);
    assert!(stslab(&args).status.success());
}

#[test]
fn demo_runs_a_custom_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"data":{"n":24,"frames":4,"height":16,"width":16,"num_shapes":2,"num_motions":2,"noise":0.1},
            "val_size":16,"pretrain_images":32,"width":2,"variant":"sts-3x3x3","init":"Sts2d",
            "pretrain":{"epochs":1,"batch_size":8,"learning_rate":0.05,"momentum":0.9,"weight_decay":0.0,"seed":0,"lr_schedule":{"kind":"constant"}},
            "finetune":{"epochs":1,"batch_size":8,"learning_rate":0.05,"momentum":0.9,"weight_decay":0.0,"seed":0,"lr_schedule":{"kind":"constant"}},
            "threshold":1.0}"#,
    )
    .unwrap();
    let o = stslab(&["demo", "--seeds", "0", "--config", path(&cfg)]);
    let text = stdout(&o);
    assert!(text.contains("seed 0:") && text.lines().last().unwrap().contains("0/1"), "{text}");
    assert_eq!(o.status.code(), Some(1));
}
