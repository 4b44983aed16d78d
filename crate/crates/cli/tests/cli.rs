use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn djkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_djkd"))
        .args(args)
        .env_remove("DJKD_DATA_ROOT")
        .env_remove("DJKD_DEVICE")
        .output()
        .expect("spawn djkd")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("exp.json");
    let train = r#"{"epochs": 1, "batch_size": 4}"#;
    let text = format!(
        r#"{{
  "seed": 3,
  "output_dir": "{out}",
  "data": {{"source": "synthetic", "resolution": 32, "synthetic": {{"benign": 5, "malignant": 5}}}},
  "model": {{
    "teacher": {{"stem_width": 4, "blocks": [1, 1, 1, 1], "widths": [8, 8, 16, 16], "decoder": [8, 8, 8, 4]}},
    "student": {{"widths": [4, 8]}},
    "ablation": "student"
  }},
  "train": {{"teacher": {train}, "student": {train}, "ablation": {train}}}
}}"#,
        out = dir.join("run").display()
    );
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn analyze_prints_table_rows() {
    let o = djkd(&["analyze", "unet_reference", "student"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<_> = out.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("model"));
    assert!(lines[1].contains("34.5") && lines[1].contains("131.7"), "{out}");

    let o = djkd(&["analyze", "--csv", "student"]);
    assert!(stdout(&o).starts_with("model,params_e6,size_mib,gflops\nstudent,"));
}

#[test]
fn unknown_model_and_device_fail() {
    let o = djkd(&["analyze", "resnet9000"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("resnet9000"));
    let o = djkd(&["--device", "cuda", "analyze", "student"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("cpu"));
}

#[test]
fn invalid_config_names_path() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("broken.json");
    fs::write(&path, r#"{"data": {"resolution": 100}}"#).unwrap();
    let o = djkd(&["--config", path.to_str().unwrap(), "train-teachers"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("broken.json"), "{}", stderr(&o));

    fs::write(&path, r#"{"no_such_key": 1}"#).unwrap();
    let o = djkd(&["--config", path.to_str().unwrap(), "show-config"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("broken.json"));
}

#[test]
fn missing_data_root_leaves_no_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("busi.json");
    let out = tmp.path().join("run");
    fs::write(&path, format!(r#"{{"data": {{"root": "{}"}}}}"#, tmp.path().join("absent").display())).unwrap();
    let o = djkd(&["--config", path.to_str().unwrap(), "--out", out.to_str().unwrap(), "train-teachers"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("busi.json"));
    assert!(!out.exists());
}

#[test]
fn synth_then_scan_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("busi");
    let o = djkd(&["--seed", "5", "synth", data.to_str().unwrap(), "--benign", "3", "--malignant", "2", "--resolution", "32"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = tmp.path().join("m.jsonl");
    let o = djkd(&["scan", data.to_str().unwrap(), "--manifest", manifest.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&manifest).unwrap().lines().count(), 5);
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let o = djkd(&["--config", &cfg, "--seed", "11", "--preset", "single_teacher", "show-config"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("\"seed\": 11"));
    assert!(out.contains("single_teacher"));
}

#[test]
fn full_pipeline_on_synthetic_data() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let run = tmp.path().join("run");

    let o = djkd(&["--config", &cfg, "train-teachers"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 2);
    let benign = run.join("checkpoints/benign_teacher.bin");
    let malignant = run.join("checkpoints/malignant_teacher.bin");
    assert!(benign.is_file() && malignant.is_file());

    let o = djkd(&["--config", &cfg, "--preset", "double_teacher", "distill", "--benign-teacher", benign.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("malignant"));

    let o = djkd(&[
        "--config",
        &cfg,
        "--preset",
        "double_teacher",
        "distill",
        "--benign-teacher",
        benign.to_str().unwrap(),
        "--malignant-teacher",
        malignant.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let sidecar = fs::read_to_string(run.join("checkpoints/student_double_teacher.bin.json")).unwrap();
    let meta: serde_json::Value = serde_json::from_str(&sidecar).unwrap();
    assert_eq!(meta["loss_weights"], serde_json::json!({"hard": 0.3, "benign": 0.5, "malignant": 0.2}));

    let student = run.join("checkpoints/student_double_teacher.bin");
    let o = djkd(&["--config", &cfg, "evaluate", benign.to_str().unwrap(), student.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(run.join("reports/evaluation.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "model,dice,precision,recall,miou,accuracy,params_e6,size_mib,gflops");
    assert_eq!(lines.len(), 3);
    let dice = lines[2].split(',').nth(1).unwrap();
    assert_eq!(dice.split('.').nth(1).unwrap().len(), 4);
    assert!(run.join("reports/evaluation.txt").is_file());

    let o = djkd(&["--config", &cfg, "ablation"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(run.join("reports/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 8);
}
