use std::path::Path;
use std::process::{Command, Output};

use liteseg::checkpoint::save_checkpoint;
use liteseg::image_io::{read_image, read_label, write_image, write_label, Image};
use liteseg::labels::LabelMap;
use liteseg::{Model, ModelConfig};
use serde_json::Value;

fn liteseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_liteseg")).args(args).env("LITESEG_THREADS", "2").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("bad json ({e}): {}", stdout(o)))
}

fn assert_schema(v: &Value, command: &str) {
    assert_eq!(v["command"], command);
    assert!(v["config"].is_object(), "{v}");
    assert!(v["metrics"].is_object(), "{v}");
    assert!(v["timings"].is_array(), "{v}");
}

fn test_image(dir: &Path, name: &str, h: usize, w: usize) -> String {
    let data = (0..h * w * 3).map(|i| ((i * 37 + i / 7) % 251) as u8).collect();
    let path = dir.join(name);
    write_image(&path, &Image::new(w, h, 3, data).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn tiny_checkpoint(dir: &Path) -> String {
    let path = dir.join("tiny.ppls");
    save_checkpoint(&Model::build(&ModelConfig::tiny(4), 0).unwrap(), &path).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn infer_writes_mask_in_class_range() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let image = test_image(dir.path(), "in.png", 64, 128);
    let mask = dir.path().join("mask.png");
    let o = liteseg(&["infer", "--ckpt", &ckpt, "--image", &image, "--out", mask.to_str().unwrap(), "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_schema(&json(&o), "infer");
    let label = read_label(&mask).unwrap();
    assert_eq!((label.height, label.width), (64, 128));
    assert!(label.data.iter().all(|&l| l <= 3));

    let color = dir.path().join("color.png");
    let o = liteseg(&["infer", "--ckpt", &ckpt, "--image", &image, "--out", color.to_str().unwrap(), "--palette"]);
    assert!(o.status.success());
    assert_eq!(read_image(&color).unwrap().channels, 3);
}

#[test]
fn eval_of_copied_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = String::new();
    for i in 0..3 {
        let img = test_image(dir.path(), &format!("{i}.png"), 16, 24);
        let data = (0..16 * 24).map(|p| if p % 17 == 0 { 255 } else { ((p / 5 + i) % 4) as u8 }).collect();
        let gt = LabelMap::new(16, 24, data).unwrap();
        write_label(dir.path().join(format!("{i}_gt.png")), &gt).unwrap();
        write_label(dir.path().join(format!("{i}_pred.png")), &gt).unwrap();
        manifest.push_str(&format!("{img}\t{i}_gt.png\t{i}_pred.png\n"));
    }
    let list = dir.path().join("list.txt");
    std::fs::write(&list, manifest).unwrap();
    let o = liteseg(&["eval", "--manifest", list.to_str().unwrap(), "--classes", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("mIoU 1.0000"), "{}", stdout(&o));
    let o = liteseg(&["eval", "--manifest", list.to_str().unwrap(), "--classes", "4", "--json"]);
    let v = json(&o);
    assert_schema(&v, "eval");
    assert_eq!(v["metrics"]["miou"], 1.0);
}

#[test]
fn eval_with_checkpoint_runs_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let img = test_image(dir.path(), "a.png", 40, 72);
    write_label(dir.path().join("a_gt.png"), &LabelMap::filled(40, 72, 1)).unwrap();
    let list = dir.path().join("list.txt");
    std::fs::write(&list, format!("{img}\ta_gt.png\n")).unwrap();
    let o = liteseg(&["eval", "--ckpt", &ckpt, "--manifest", list.to_str().unwrap(), "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&o);
    assert_eq!(v["config"]["classes"], 4);
    let miou = v["metrics"]["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));
}

#[test]
fn bench_echoes_resolution() {
    let o = liteseg(&["bench", "--preset", "T", "--size", "512x1024", "--runs", "3", "--warmup", "1", "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&o);
    assert_schema(&v, "bench");
    assert_eq!(v["metrics"]["resolution"], serde_json::json!([512, 1024]));
    assert_eq!(v["config"]["resolution"], serde_json::json!([512, 1024]));
    assert_eq!(v["timings"].as_array().unwrap().len(), 3);
    assert!(v["metrics"]["fps"].as_f64().unwrap() > 0.0);
}

#[test]
fn train_then_infer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{
        "model": {"encoder": "encoder-tiny", "decoder_channels": [16, 32, 64], "num_classes": 4,
                  "sppm_inter_channels": 64, "sppm_out_channels": 64},
        "data": {"kind": "synthetic", "num_samples": 8, "seed": 1},
        "iters": 3, "batch_size": 2, "base_lr": 0.01,
        "augment": {"scale_range": [1.0, 1.0], "crop": [64, 128], "brightness": 0.0, "contrast": 0.0, "saturation": 0.0}
    }"#;
    let cfg_path = dir.path().join("train.json");
    std::fs::write(&cfg_path, cfg).unwrap();
    let ckpt = dir.path().join("out.ppls");
    let csv = dir.path().join("loss.csv");
    let o = liteseg(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--seed",
        "4",
        "--loss-csv",
        csv.to_str().unwrap(),
        "--json",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&o);
    assert_schema(&v, "train");
    assert_eq!(v["metrics"]["iters"], 3);
    let curve = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(curve.lines().count(), 4);
    assert_eq!(curve.lines().next(), Some("iter,lr,loss"));

    let image = test_image(dir.path(), "x.png", 64, 128);
    let mask = dir.path().join("m.png");
    let o = liteseg(&["infer", "--ckpt", ckpt.to_str().unwrap(), "--image", &image, "--out", mask.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read_label(&mask).unwrap().data.iter().all(|&l| l <= 3));
}

#[test]
fn gradcheck_passes() {
    let o = liteseg(&["gradcheck", "--json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let v = json(&o);
    assert_schema(&v, "gradcheck");
    assert_eq!(v["metrics"]["passed"], true);
    assert!(v["metrics"]["cases"].as_array().unwrap().len() >= 30);
}

#[test]
fn exit_codes() {
    assert_eq!(liteseg(&[]).status.code(), Some(1));
    assert_eq!(liteseg(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(liteseg(&["bench", "--size", "64x128"]).status.code(), Some(1));
    assert_eq!(liteseg(&["bench", "--preset", "tiny", "--size", "64by128"]).status.code(), Some(1));
    assert_eq!(liteseg(&["train", "--config", "/nonexistent/c.json", "--out", "/tmp/x"]).status.code(), Some(1));
    assert_eq!(liteseg(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.ppls");
    std::fs::write(&bogus, b"definitely not a checkpoint").unwrap();
    let image = test_image(dir.path(), "x.png", 32, 32);
    let o = liteseg(&["infer", "--ckpt", bogus.to_str().unwrap(), "--image", &image, "--out", "/tmp/never.png"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not a checkpoint"));
}
