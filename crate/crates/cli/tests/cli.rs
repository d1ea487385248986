use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mfanet::dataset::{Dataset, PixelFormat, Sample, encode_image};
use mfanet::metrics::SegmentationMask;
use mfanet::preprocessing::{ClaheParams, GrayImage, WindowParams, clahe, ct_window};

fn mfanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfanet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_reproducible_and_handles_zero_count() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = mfanet(&["synth", "--out", s(dir), "--count", "8", "--seed", "1"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        assert_eq!(v["count"], 8);
    }
    let ta = tree(&a);
    assert_eq!(ta.len(), 17);
    assert_eq!(ta, tree(&b));

    let empty = tmp.path().join("empty");
    let o = mfanet(&["synth", "--out", s(&empty), "--count", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(Dataset::load(&empty).unwrap().len(), 0);
}

#[test]
fn synth_reports_unwritable_output() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("occupied");
    fs::write(&file, b"x").unwrap();
    let o = mfanet(&["synth", "--out", s(&file.join("sub")), "--count", "1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("occupied"), "{}", stderr(&o));
}

#[test]
fn bad_flags_exit_with_validation_code() {
    let o = mfanet(&["synth", "--count", "3"]);
    assert_eq!(o.status.code(), Some(1));
    let o = mfanet(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
}

fn synth(dir: &Path, count: &str, seed: &str) {
    let o = mfanet(&["synth", "--out", s(dir), "--count", count, "--seed", seed]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn preprocess_matches_direct_composition() {
    let tmp = tempfile::tempdir().unwrap();
    let (raw, out) = (tmp.path().join("raw"), tmp.path().join("pre"));
    synth(&raw, "3", "2");
    let o = mfanet(&[
        "preprocess", "--in", s(&raw), "--out", s(&out),
        "--window-center", "30", "--window-width", "350", "--clahe-clip", "3", "--clahe-tiles", "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let input = Dataset::load(&raw).unwrap();
    let window = WindowParams { center: 30.0, width: 350.0 };
    let params = ClaheParams { tiles_x: 2, tiles_y: 2, clip_limit: 3.0, ..ClaheParams::default() };
    for sample in &input.samples {
        let direct = clahe(&ct_window(&sample.image, &window).unwrap(), &params).unwrap();
        let written = fs::read(out.join(format!("images/{}.png", sample.id))).unwrap();
        assert_eq!(written, encode_image(&direct, PixelFormat::Gray8));
        let mask = format!("masks/{}.png", sample.id);
        assert_eq!(fs::read(out.join(&mask)).unwrap(), fs::read(raw.join(&mask)).unwrap());
    }
    assert_eq!(Dataset::load(&out).unwrap().format, PixelFormat::Gray8);
}

#[test]
fn preprocess_keeps_constant_images_and_clamps_window_edges() {
    let tmp = tempfile::tempdir().unwrap();
    let (raw, out) = (tmp.path().join("raw"), tmp.path().join("pre"));
    let samples = [(-160.0, "0000"), (240.0, "0001"), (40.0, "0002")]
        .into_iter()
        .map(|(hu, id)| Sample {
            id: id.into(),
            image: GrayImage::filled(16, 16, hu),
            mask: SegmentationMask::empty(16, 16),
        })
        .collect();
    Dataset { format: PixelFormat::Hu16, width: 16, height: 16, samples }.save(&raw).unwrap();
    let o = mfanet(&["preprocess", "--in", s(&raw), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pre = Dataset::load(&out).unwrap();
    let expect = [0.0, 1.0, 128.0 / 255.0];
    for (sample, want) in pre.samples.iter().zip(expect) {
        assert!(sample.image.pixels().iter().all(|&v| v == want), "{} -> {:?}", sample.id, &sample.image.pixels()[..2]);
    }
}

#[test]
fn preprocess_names_missing_mask() {
    let tmp = tempfile::tempdir().unwrap();
    let (raw, out) = (tmp.path().join("raw"), tmp.path().join("pre"));
    synth(&raw, "2", "0");
    fs::remove_file(raw.join("masks/0001.png")).unwrap();
    let o = mfanet(&["preprocess", "--in", s(&raw), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("masks/0001.png"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn gradcheck_passes_and_repeats() {
    let a = mfanet(&["gradcheck", "--seed", "0"]);
    assert!(a.status.success(), "{}{}", stdout(&a), stderr(&a));
    let text = stdout(&a);
    assert!(text.starts_with("item,max_rel_error,threshold,eps,pass\n"));
    assert!(text.lines().count() > 12);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",true")));
    assert_eq!(stdout(&mfanet(&["gradcheck"])), text);
}

const SMALL: &str = "input_size=32\nbase_channels=4\norgan_radius_min=8\norgan_radius_max=10\nlesion_radius_min=2\nlesion_radius_max=4\nmax_steps=4\nbatch_size=2\neval_every=2\nseed=3\n";

#[test]
fn train_then_eval_reproduces_logged_dice() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let data = tmp.path().join("data");
    let o = mfanet(&["synth", "--out", s(&data), "--count", "3", "--size", "32", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let ckpt = tmp.path().join("model.mfac");
    let o = mfanet(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let curve = fs::read_to_string(tmp.path().join("model.csv")).unwrap();
    assert_eq!(curve.lines().count(), 5);

    let report = tmp.path().join("report.json");
    let overlays = tmp.path().join("overlays");
    let o = mfanet(&[
        "eval", "--ckpt", s(&ckpt), "--data", s(&data), "--report", s(&report), "--config", s(&cfg),
        "--overlays", s(&overlays),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["mean"]["dice"], summary["final_val_dice"]);
    assert_eq!(r["cases"].as_array().unwrap().len(), 3);
    assert_eq!(tree(&overlays).len(), 3);
    assert!(overlays.join("0002.png").exists());
}

#[test]
fn train_rejects_bad_config_without_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "1", "0");
    let cfg = tmp.path().join("bad.cfg");
    let ckpt = tmp.path().join("model.mfac");
    for (text, key) in [("loss_mix=1.5\n", "loss_mix"), ("dropout=0.1\n", "dropout"), ("input_size=32\norgan_radius_max=10\norgan_radius_min=8\nlesion_radius_max=4\n", "input_size")] {
        fs::write(&cfg, text).unwrap();
        let o = mfanet(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt)]);
        assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
        assert!(stderr(&o).contains(key), "{}", stderr(&o));
        assert!(!ckpt.exists());
    }
}

#[test]
fn train_reports_non_finite_loss_with_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "2", "0");
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "base_channels=2\nlearning_rate=1e38\nmax_steps=40\nbatch_size=2\n").unwrap();
    let ckpt = tmp.path().join("model.mfac");
    let o = mfanet(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite loss at step"), "{}", stderr(&o));
    assert!(!ckpt.exists());
}

#[test]
fn ablate_emits_four_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, SMALL.replace("max_steps=4", "max_steps=1")).unwrap();
    let data = tmp.path().join("data");
    let o = mfanet(&["synth", "--out", s(&data), "--count", "5", "--size", "32", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = tmp.path().join("ablation.json");
    let o = mfanet(&["ablate", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let names: Vec<&str> = v["rows"].as_array().unwrap().iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["baseline", "ssce", "csse", "scse"]);
    assert_eq!(v["train_cases"], 4);
    let printed: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(printed, v);
}
