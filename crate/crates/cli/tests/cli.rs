use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tongue_core::contour::{write_annotation, Contour};

fn tongue(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tongue"))
        .args(args)
        .env_remove("TONGUE_DEVICE")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn line(id: &str, y: f64) -> Contour {
    let xy: Vec<(f64, f64)> = (0..=40).map(|x| (x as f64, y)).collect();
    let mut c = Contour::from_xy(id, &xy).unwrap();
    c.px_per_mm = Some(4.0);
    c
}

fn write_pair(dir: &Path, shift: f64) -> (std::path::PathBuf, std::path::PathBuf) {
    let gold = dir.join("gold");
    let pred = dir.join("pred");
    fs::create_dir_all(&gold).unwrap();
    fs::create_dir_all(&pred).unwrap();
    for (i, y) in [10.0, 20.0, 30.0].into_iter().enumerate() {
        let id = format!("f{i}");
        write_annotation(&gold.join(format!("{id}.json")), &line(&id, y)).unwrap();
        write_annotation(&pred.join(format!("{id}.csv")), &line(&id, y + shift)).unwrap();
    }
    (pred, gold)
}

#[test]
fn eval_reports_pixel_and_millimetre_msd() {
    let tmp = tempfile::tempdir().unwrap();
    let (pred, gold) = write_pair(tmp.path(), 2.0);
    let out = tmp.path().join("eval");
    let o = tongue(&["eval", "--pred", p(&pred), "--gold", p(&gold), "--out", p(&out), "--plot"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["aggregate_px"]["mean"], 2.0);
    assert_eq!(report["aggregate_px"]["std"], 0.0);
    assert_eq!(report["aggregate_mm"]["mean"], 0.5);
    assert!(out.join("eval.csv").exists());
    assert!(out.join("eval_hist.svg").exists());

    let o = tongue(&[
        "eval", "--pred", p(&pred), "--gold", p(&gold), "--out", p(&out), "--px-per-mm", "1",
    ]);
    assert!(o.status.success());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["aggregate_mm"]["mean"], 2.0);
}

#[test]
fn eval_without_shared_frames_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, gold) = write_pair(tmp.path(), 0.0);
    let other = tmp.path().join("other");
    fs::create_dir_all(&other).unwrap();
    write_annotation(&other.join("zz.csv"), &line("zz", 5.0)).unwrap();
    let o = tongue(&["eval", "--pred", p(&other), "--gold", p(&gold), "--out", p(&tmp.path().join("e"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unsupported_device_and_bad_config_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_tongue"))
        .args(["synth", "--out", p(&tmp.path().join("s")), "--n-frames", "1"])
        .env("TONGUE_DEVICE", "cuda")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));

    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"model": {"arch": "unet", "input_size": 40}}"#).unwrap();
    let o = tongue(&["train", "--config", p(&cfg), "--out", p(&tmp.path().join("t"))]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));

    fs::write(&cfg, "{ not json").unwrap();
    let o = tongue(&["train", "--config", p(&cfg), "--out", p(&tmp.path().join("t"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_writes_frames_annotations_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("s");
    let o = tongue(&["synth", "--out", p(&out), "--n-frames", "5", "--image-size", "32", "--split", "0.6,0.2,0.2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_dir(out.join("frames")).unwrap().count(), 5);
    assert_eq!(fs::read_dir(out.join("annotations")).unwrap().count(), 5);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let items = manifest["items"].as_array().unwrap();
    assert_eq!(items.len(), 5);
    let train = items.iter().filter(|e| e["split"] == "train").count();
    assert_eq!(train, 3);
    assert!(out.join("synth_config.json").exists());

    let o = tongue(&["synth", "--out", p(&out), "--split", "0.5,0.5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_then_extract_accounts_for_every_frame() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(tongue(&["synth", "--out", p(&data), "--n-frames", "12", "--image-size", "32", "--seed", "4"])
        .status
        .success());
    let cfg = tmp.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"model": {"input_size": 32, "unet_channels": [4, 8]},
            "train": {"epochs": 2, "batch_size": 4, "learning_rate": 0.001},
            "data": {"manifest": "data/manifest.json"},
            "split": [0.5, 0.25, 0.25]}"#,
    )
    .unwrap();
    let run = tmp.path().join("run");
    let o = tongue(&["train", "--config", p(&cfg), "--out", p(&run), "--epochs", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(run.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2, "header plus one epoch after the override");
    assert!(run.join("config.json").exists());

    let pred = tmp.path().join("pred");
    let o = tongue(&[
        "extract", "--checkpoint", p(&run), "--input", p(&data.join("frames")), "--out", p(&pred),
        "--overlay", "--threads", "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let written = fs::read_dir(&pred)
        .unwrap()
        .filter(|e| {
            let name = e.as_ref().unwrap().file_name();
            let name = name.to_string_lossy();
            name.ends_with(".csv") && name != "failures.csv"
        })
        .count();
    let failures = fs::read_to_string(pred.join("failures.csv")).unwrap().lines().count() - 1;
    assert_eq!(written + failures, 12);
    assert!(String::from_utf8_lossy(&o.stdout).contains("frames/s"));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["train_synthetic.json", "fraction_sweep.json"] {
        let text = fs::read_to_string(root.join(name)).unwrap();
        let cfg = tongue_core::experiment::ExperimentConfig::from_json(&text, &root).unwrap();
        cfg.model.validate().unwrap();
        cfg.train.validate().unwrap();
    }
}
