use std::path::Path;
use std::process::Command;

use serde_json::{json, Value};
use snapkit_core::pcdata::load_scene;

fn snapkit(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_snapkit")).args(args).output().unwrap();
    assert!(out.status.success(), "snapkit {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_train_auto_eval_simulate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    snapkit(&["gen-data", "--domain", "indoor", "--n-scenes", "2", "--seed", "3", "--points", "600", "--out", p(&data)]);
    assert!(data.join("scene_0001/manifest.json").exists());

    let cfg = tmp.path().join("train.json");
    std::fs::write(&cfg, json!({"epochs": 1, "objects_per_scene": 4, "max_click_budget": 3}).to_string()).unwrap();
    let summary: Value = serde_json::from_str(&snapkit(&["train", "--config", p(&cfg), "--data-dirs", p(&data), "--out", p(&run)])).unwrap();
    assert_eq!(summary["steps"], 2);
    let ckpt = run.join("model.safetensors");
    assert!(ckpt.exists() && run.join("train_log.jsonl").exists() && run.join("vocabulary.json").exists());

    let preds = tmp.path().join("preds");
    let scene0 = data.join("scene_0000");
    let auto_cfg = tmp.path().join("auto.json");
    std::fs::write(&auto_cfg, json!({"v0": {"indoor": 1.6, "outdoor": 8.0, "aerial": 12.0}, "k_max": 2, "tau_s": 0.05, "tau_nms": 0.6, "batch_limit": 64}).to_string()).unwrap();
    snapkit(&["auto", "--checkpoint", p(&ckpt), "--scene", p(&scene0), "--out", p(&preds.join("scene_0000.json")), "--config", p(&auto_cfg)]);
    let pred: Value = serde_json::from_slice(&std::fs::read(preds.join("scene_0000.json")).unwrap()).unwrap();
    assert_eq!(pred["instance"].as_array().unwrap().len(), 600);

    let report = tmp.path().join("report.json");
    let out = snapkit(&[
        "eval", "--gt", p(&scene0), "--pred", p(&preds.join("scene_0000.json")), "--checkpoint", p(&ckpt), "--ks", "1,2",
        "--class-agnostic", "--report", p(&report),
    ]);
    assert!(out.contains("PQ") && out.contains("IoU@2"));
    let r: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let pq = r["panoptic"]["pq"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&pq));
    assert!(r["iou_at_k"]["1"].is_number());

    let lines = snapkit(&["simulate", "--checkpoint", p(&ckpt), "--data", p(&data), "--budget", "2", "--strategy", "random"]);
    for l in lines.lines() {
        let v: Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["ious"].as_array().unwrap().len(), 2);
    }
    assert!(lines.lines().count() >= 8);
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    snapkit(&["gen-data", "--domain", "outdoor", "--n-scenes", "2", "--seed", "9", "--points", "500", "--out", p(&data)]);
    let preds = tmp.path().join("preds");
    std::fs::create_dir_all(&preds).unwrap();
    for name in ["scene_0000", "scene_0001"] {
        let s = load_scene(data.join(name)).unwrap();
        let masks: Vec<Value> = s
            .instances()
            .into_iter()
            .map(|(id, points)| json!({"points": points, "score": 0.9, "class": s.instance_class(id)}))
            .collect();
        let file = json!({"scene_id": name, "instance": s.instance_ids, "class": s.class_ids, "masks": masks});
        std::fs::write(preds.join(format!("{name}.json")), file.to_string()).unwrap();
    }
    let report = tmp.path().join("r.json");
    snapkit(&["eval", "--gt", p(&data), "--pred", p(&preds), "--report", p(&report)]);
    let r: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["scenes"], 2);
    assert_eq!(r["panoptic"]["pq"], 1.0);
    assert_eq!(r["ap"]["ap"], 1.0);
}

#[test]
fn bad_input_fails_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_snapkit")).args(["gen-data", "--domain", "underwater", "--out", "/tmp/x"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("underwater"));
    let out = Command::new(env!("CARGO_BIN_EXE_snapkit")).args(["eval", "--gt", "/nonexistent"]).output().unwrap();
    assert!(!out.status.success());
}
