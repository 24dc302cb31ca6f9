use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ppn_cli::commands::Model;
use ppn_core::data::encode_ppm;
use ppn_core::weights::WeightStore;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn ppn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ppn")).args(args).output().unwrap()
}

fn cfg(name: &str) -> String {
    configs().join(name).display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn key(text: &str, k: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{k}=")))
        .unwrap_or_else(|| panic!("no {k} in output:\n{text}"))
        .parse()
        .unwrap()
}

#[test]
fn analyze_reports_totals_and_ratio() {
    let o = ppn(&["analyze", "--config", &cfg("ppn-300.cfg"), "--compare", &cfg("ssd-300.cfg")]);
    assert!(o.status.success());
    let out = stdout(&o);
    let totals: Vec<f64> = out.lines().filter_map(|l| l.strip_prefix("param_total=")).map(|v| v.parse().unwrap()).collect();
    assert_eq!(totals.len(), 2);
    assert!(key(&out, "param_ratio") >= 2.5);
    assert!((key(&out, "param_ratio") - totals[1] / totals[0]).abs() < 1e-5);
}

#[test]
fn bad_inputs_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "model.mode = ppn\nmodel.wings = 2\n").unwrap();
    let o = ppn(&["analyze", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key `model.wings`"));
    assert_eq!(ppn(&["analyze"]).status.code(), Some(2));
    assert_eq!(ppn(&["analyze", "--config", "/nonexistent.cfg"]).status.code(), Some(2));
}

#[test]
fn zero_step_training_writes_init_weights() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("w.ppnw");
    let o = ppn(&["train", "--config", &cfg("tiny-ppn.cfg"), "--out", out.to_str().unwrap(), "--steps", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = Model::load(&configs().join("tiny-ppn.cfg")).unwrap();
    assert_eq!(WeightStore::load(&out).unwrap(), m.detector.init_weights(m.config.train.seed));
    let csv = std::fs::read_to_string(dir.path().join("w.loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

#[test]
fn loss_csv_has_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("w.ppnw");
    let o = ppn(&["train", "--config", &cfg("tiny-ssd.cfg"), "--out", out.to_str().unwrap(), "--steps", "7"]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(dir.path().join("w.loss.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().enumerate().all(|(i, r)| r.starts_with(&format!("{i},"))));
}

/// Only the coarsest level's first anchor fires, for class 1, with zero box
/// offsets, so the single detection is that anchor exactly.
#[test]
fn oracle_weights_score_perfect_map() {
    let dir = tempfile::tempdir().unwrap();
    let m = Model::load(&configs().join("tiny-ssd.cfg")).unwrap();
    let k = m.config.model.num_classes;
    let mut w = m.detector.init_weights(0);
    for (name, p) in w.iter_mut() {
        if name.ends_with("class/weights") || name.ends_with("box/weights") || name.ends_with("box/bias") {
            p.data_mut().fill(0.0);
        }
        if name.ends_with("class/bias") {
            p.data_mut().fill(-20.0);
            if name == "predictor/level3/class/bias" {
                p.data_mut()[1] = 20.0;
            }
        }
    }
    let weights = dir.path().join("oracle.ppnw");
    w.save(&weights).unwrap();
    let anchor = m.anchors.boxes[m.anchors.level_ranges[3].start];
    let ds = dir.path().join("ds");
    std::fs::create_dir(&ds).unwrap();
    std::fs::write(ds.join("000000.ppm"), encode_ppm(64, 64, &vec![90u8; 64 * 64 * 3])).unwrap();
    let gt = format!("0 1 {} {} {} {}\n", anchor.ymin, anchor.xmin, anchor.ymax, anchor.xmax);
    std::fs::write(ds.join("groundtruth.txt"), gt).unwrap();
    assert!(k > 1);
    let o = ppn(&["eval", "--config", &cfg("tiny-ssd.cfg"), "--weights", weights.to_str().unwrap(), "--dataset", ds.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(json["map"], 1.0);
    assert_eq!(json["num_detections"], 1);
    assert_eq!(json["per_class_ap"][0], serde_json::Value::Null);
    assert_eq!(json["calibration"]["levels"][3]["tp_count"], 1);
}

#[test]
fn eval_json_is_stable_and_shaped() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.ppnw");
    assert!(ppn(&["train", "--config", &cfg("tiny-ppn.cfg"), "--out", w.to_str().unwrap(), "--steps", "3"]).status.success());
    let args = ["eval", "--config", &cfg("tiny-ppn.cfg"), "--weights", w.to_str().unwrap()];
    let (a, b) = (ppn(&args), ppn(&args));
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let json: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(json["mode"], "ppn");
    assert_eq!(json["num_images"], 200);
    assert_eq!(json["per_class_ap"].as_array().unwrap().len(), 3);
    let levels = json["calibration"]["levels"].as_array().unwrap();
    assert_eq!(levels.len(), 4);
    for l in levels {
        for field in ["level", "tp_count", "mean_score", "std_score"] {
            assert!(l.get(field).is_some(), "missing {field}");
        }
    }
    assert!(json["calibration"]["spread"].as_f64().unwrap() >= 0.0);
    assert!((0.0..=1.0).contains(&json["map"].as_f64().unwrap()));
}

#[test]
fn eval_rejects_mismatched_weights() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.ppnw");
    assert!(ppn(&["train", "--config", &cfg("tiny-ppn.cfg"), "--out", w.to_str().unwrap(), "--steps", "0"]).status.success());
    let o = ppn(&["eval", "--config", &cfg("tiny-ssd.cfg"), "--weights", w.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn blank_image_with_prior_heads_detects_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let m = Model::load(&configs().join("ppn-300.cfg")).unwrap();
    let mut w = m.detector.init_weights(0);
    for (name, p) in w.iter_mut() {
        if name.ends_with("class/weights") {
            p.data_mut().fill(0.0);
        }
    }
    let weights = dir.path().join("w.ppnw");
    w.save(&weights).unwrap();
    let image = dir.path().join("blank.ppm");
    std::fs::write(&image, encode_ppm(300, 300, &vec![0u8; 300 * 300 * 3])).unwrap();
    let o = ppn(&["infer", "--config", &cfg("ppn-300.cfg"), "--weights", weights.to_str().unwrap(), "--image", image.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.is_empty());
}

#[test]
fn infer_lines_are_sorted_and_clipped() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.ppnw");
    assert!(ppn(&["train", "--config", &cfg("tiny-ppn.cfg"), "--out", w.to_str().unwrap(), "--steps", "0"]).status.success());
    // a permissive threshold so there is something to look at
    let text = std::fs::read_to_string(configs().join("tiny-ppn.cfg"))
        .unwrap()
        .replace("postprocess.score_threshold = 0.05", "postprocess.score_threshold = 0.0");
    let low = dir.path().join("low.cfg");
    std::fs::write(&low, text).unwrap();
    let ds = dir.path().join("ds");
    assert!(ppn(&["dataset", "--config", low.to_str().unwrap(), "--out", ds.to_str().unwrap(), "--held-out"]).status.success());
    let o = ppn(&["infer", "--config", low.to_str().unwrap(), "--weights", w.to_str().unwrap(), "--image", ds.join("000000.ppm").to_str().unwrap()]);
    assert!(o.status.success());
    let dets: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(dets.len(), 100);
    let scores: Vec<f64> = dets.iter().map(|d| d["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    for d in &dets {
        assert!(d["box"].as_array().unwrap().iter().all(|v| (0.0..=1.0).contains(&v.as_f64().unwrap())));
    }
}

#[test]
fn infer_rejects_malformed_ppm() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.ppnw");
    assert!(ppn(&["train", "--config", &cfg("tiny-ppn.cfg"), "--out", w.to_str().unwrap(), "--steps", "0"]).status.success());
    let img = dir.path().join("bad.ppm");
    std::fs::write(&img, b"P3\n64 64\n255\n").unwrap();
    let o = ppn(&["infer", "--config", &cfg("tiny-ppn.cfg"), "--weights", w.to_str().unwrap(), "--image", img.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_single_repeat_totals_add_up() {
    let o = ppn(&["bench", "--config", &cfg("tiny-ssd.cfg"), "--repeat", "1"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(key(&out, "repeat"), 1.0);
    let stages: f64 = out
        .lines()
        .filter(|l| l.starts_with("stage."))
        .map(|l| l.split('=').nth(1).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((stages - key(&out, "total.median_ms")).abs() < 1e-3);
    assert!(out.contains("stage.extras.median_ms="));
}
