use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn platewaste(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_platewaste"))
        .args(args)
        .env_remove("PLATEWASTE_OUT")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn estimate_on_fixture_prints_published_row() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    assert!(platewaste(&["synth", "--kind", "table6", "--out", p(&fx)]).status.success());
    let out = dir.path().join("est");
    let run = platewaste(&[
        "estimate",
        "--manifest",
        p(&fx.join("AdasPolo/manifest.json")),
        "--out",
        p(&out),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let csv = fs::read_to_string(out.join("waste.csv")).unwrap();
    assert!(csv.starts_with("food_type,class,pre_weighted_average,post_weighted_average,eating_rate,remaining_rate\n"));
    assert!(csv.contains("AdasPolo,1 / AdasPolo,0.399,0.047,88.2,11.8\n"), "{csv}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("waste.json")).unwrap()).unwrap();
    assert_eq!(json[0]["food_type"], "AdasPolo");
}

#[test]
fn evaluate_with_ground_truth_copies_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(platewaste(&["synth", "--size", "32", "--count", "16", "--out", p(&data)]).status.success());
    let out = dir.path().join("eval");
    let run = platewaste(&[
        "evaluate",
        "--manifest",
        p(&data.join("manifest.json")),
        "--pred-dir",
        p(&data.join("masks")),
        "--out",
        p(&out),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    for key in ["pixel_accuracy", "iou", "dice", "dpa"] {
        assert_eq!(json[key], 1.0, "{key}");
    }
}

#[test]
fn exit_codes_follow_error_kind() {
    assert_eq!(platewaste(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(platewaste(&["train", "--width", "many"]).status.code(), Some(1));
    assert_eq!(platewaste(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    assert_eq!(platewaste(&["estimate", "--manifest", p(&missing)]).status.code(), Some(2));

    let bad = dir.path().join("run.json");
    fs::write(&bad, r#"{"train": {"epochz": 3}}"#).unwrap();
    let run = platewaste(&["--config", p(&bad), "hist"]);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("epochz"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(platewaste(&["synth", "--size", "16", "--count", "16", "--out", p(&data)]).status.success());
    let cfg = dir.path().join("run.json");
    fs::write(
        &cfg,
        format!(
            r#"{{"manifest": {:?}, "model": {{"width": 2}}, "train": {{"epochs": 5}}}}"#,
            data.join("manifest.json")
        ),
    )
    .unwrap();
    let out = dir.path().join("run");
    let run = platewaste(&["--config", p(&cfg), "train", "--epochs", "1", "--out", p(&out)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("train_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["model"]["base_width"], 2);
}

#[test]
fn augment_triples_the_train_split() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(platewaste(&["synth", "--size", "16", "--count", "20", "--out", p(&data)]).status.success());
    let out = dir.path().join("aug");
    let run = platewaste(&[
        "augment",
        "--manifest",
        p(&data.join("manifest.json")),
        "--preset",
        "AdasPolo",
        "--out",
        p(&out),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let count = |m: &Path, split: &str| {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(m).unwrap()).unwrap();
        v["entries"].as_array().unwrap().iter().filter(|e| e["split"] == split).count()
    };
    let src = data.join("manifest.json");
    let dst = out.join("manifest.json");
    assert_eq!(count(&dst, "train"), 3 * count(&src, "train"));
    assert_eq!(count(&dst, "test"), count(&src, "test"));
    assert_eq!(count(&dst, "val"), count(&src, "val"));
}

#[test]
fn predict_writes_one_mask_per_image() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(platewaste(&["synth", "--size", "16", "--count", "16", "--out", p(&data)]).status.success());
    let run_dir = dir.path().join("run");
    let train = platewaste(&[
        "train",
        "--manifest",
        p(&data.join("manifest.json")),
        "--width",
        "2",
        "--epochs",
        "1",
        "--out",
        p(&run_dir),
    ]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let pred = dir.path().join("pred");
    let run = platewaste(&[
        "predict",
        "--checkpoint",
        p(&run_dir.join("checkpoint.pwck")),
        p(&data.join("images")),
        "--out",
        p(&pred),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(fs::read_dir(&pred).unwrap().count(), 16);
}
