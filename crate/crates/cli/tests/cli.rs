use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mffa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mffa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_json(path: &Path, v: serde_json::Value) {
    fs::write(path, serde_json::to_string(&v).unwrap()).unwrap();
}

fn toy(dir: &Path, videos: usize, frames: usize) -> std::path::PathBuf {
    let cfg = dir.join("toy.json");
    write_json(
        &cfg,
        serde_json::json!({"videos": videos, "frames_per_video": frames, "width": 32, "height": 32}),
    );
    let out = dir.join("data");
    let o = mffa(&["gen-toydata", "--config", s(&cfg), "--seed", "3", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn unknown_flag_prints_usage_and_exits_1() {
    let o = mffa(&["gradcheck", "--fast"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&mffa(&["frobnicate"])), 1);
    assert_eq!(code(&mffa(&["--help"])), 0);
}

#[test]
fn validation_and_runtime_failures_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    write_json(&bad, serde_json::json!({"videoz": 2}));
    let out = dir.path().join("o");
    assert_eq!(code(&mffa(&["gen-toydata", "--config", s(&bad), "--seed", "1", "--out", s(&out)])), 1);
    write_json(&bad, serde_json::json!({"videos": 0}));
    assert_eq!(code(&mffa(&["gen-toydata", "--config", s(&bad), "--seed", "1", "--out", s(&out)])), 1);
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&mffa(&["gen-toydata", "--config", s(&missing), "--seed", "1", "--out", s(&out)])), 2);
}

#[test]
fn synth_writes_n_pairs_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path(), 1, 3);
    let frame = data.join("video_00/frame_0000.ppm");
    let mask = data.join("video_00/frame_0000.pgm");
    let out = dir.path().join("synth");
    let o = mffa(&["synth", "--in", s(&frame), "--mask", s(&mask), "--n", "5", "--seed", "9", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.iter().filter(|n| n.ends_with(".ppm")).count(), 5);
    assert_eq!(names.iter().filter(|n| n.ends_with(".pgm")).count(), 5);
    assert_eq!(names.len(), 11);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["videos"][0]["labeled_indices"], serde_json::json!([0, 1, 2, 3, 4]));
    // The center frame is the untouched source.
    assert_eq!(fs::read(out.join("frame_0002.ppm")).unwrap(), fs::read(&frame).unwrap());
}

#[test]
fn train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path(), 2, 24);
    let cfg = dir.path().join("train.json");
    write_json(
        &cfg,
        serde_json::json!({
            "epochs": 2,
            "max_samples_per_epoch": 4,
            "synthesis": {"translation": [4.0, 8.0]},
            "model": {
                "encoder": {"base_channels": 4, "out_channels": 8},
                "mffa": {"channels": 8},
                "decoder_channels": 8
            }
        }),
    );
    let run = dir.path().join("run");
    let o = mffa(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["epoch_000.ckpt", "epoch_001.ckpt", "final.ckpt", "loss_log.jsonl", "eval_log.jsonl", "config.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run.join("loss_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        keys.sort();
        assert_eq!(keys, ["epoch", "loss_1st", "loss_bw", "loss_fw", "loss_last", "loss_total", "lr"]);
    }

    let ckpt = run.join("final.ckpt");
    let report = dir.path().join("report.json");
    let overlays = dir.path().join("overlays");
    let o = mffa(&[
        "eval", "--ckpt", s(&ckpt), "--data", s(&data), "--report", s(&report), "--overlays", s(&overlays),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let frames = r["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 16);
    let mean = frames.iter().map(|f| f["dsc"].as_f64().unwrap()).sum::<f64>() / frames.len() as f64;
    assert!((mean - r["overall"]["mean_dsc"].as_f64().unwrap()).abs() < 1e-9);
    assert_eq!(fs::read_dir(overlays.join("video_01")).unwrap().count(), 8);

    let masks = dir.path().join("masks");
    let o = mffa(&["infer", "--ckpt", s(&ckpt), "--frames", s(&data.join("video_00")), "--out", s(&masks)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_dir(&masks).unwrap().count(), 24);
    assert!(masks.join("frame_0023.pgm").exists());

    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert_eq!(code(&mffa(&["infer", "--ckpt", s(&ckpt), "--frames", s(&empty), "--out", s(&masks)])), 1);
}

#[test]
fn gradcheck_passes() {
    let o = mffa(&["gradcheck"]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{out}");
    assert!(out.contains(", 0 failed"));
    assert!(!out.contains("FAIL"));
}
