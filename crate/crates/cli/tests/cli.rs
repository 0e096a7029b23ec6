use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vwv::dataio::{load_encoder, mask_path, read_mask, write_mask};
use vwv::encoder::init_params;

const SMALL: &str = r#"{
  "synth": {"train_videos": 2, "test_videos": 2, "seed": 3, "video": {"num_frames": 6}},
  "train": {"episodes": 4}
}"#;

fn vwv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vwv"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(args: &[&str]) {
    let out = vwv(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let w = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(w.path("cfg.json"), SMALL).unwrap();
        w
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    /// Synthesizes data and trains a tiny checkpoint.
    fn trained() -> Self {
        let w = Self::new();
        ok(&["synth", "--config", s(&w.path("cfg.json")), "--out", s(&w.path("data"))]);
        ok(&[
            "train",
            "--data",
            s(&w.path("data")),
            "--config",
            s(&w.path("cfg.json")),
            "--out",
            s(&w.path("run")),
        ]);
        w
    }

    fn infer(&self, out: &str, extra: &[&str]) -> Output {
        let (run, data, out, cfg) = (
            self.path("run"),
            self.path("data"),
            self.path(out),
            self.path("cfg.json"),
        );
        let mut args = vec![
            "infer",
            "--checkpoint",
            s(&run),
            "--video",
            s(&data),
            "--config",
            s(&cfg),
        ];
        args.extend(["--out", s(&out)]);
        args.extend(extra);
        vwv(&args)
    }
}

#[test]
fn synth_writes_a_manifest_deterministically() {
    let w = Workspace::new();
    for out in ["a", "b"] {
        ok(&["synth", "--config", s(&w.path("cfg.json")), "--out", s(&w.path(out))]);
    }
    let a = fs::read_to_string(w.path("a/manifest.json")).unwrap();
    assert_eq!(a, fs::read_to_string(w.path("b/manifest.json")).unwrap());
    assert_eq!(a.matches("\"name\"").count(), 4);
    assert!(w.path("a/resolved-config.json").exists());
}

#[test]
fn unknown_key_exits_with_config_error() {
    let w = Workspace::new();
    fs::write(w.path("bad.json"), r#"{"adapt": {"dleta": 3}}"#).unwrap();
    let out = vwv(&["synth", "--config", s(&w.path("bad.json")), "--out", s(&w.path("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dleta"));
}

#[test]
fn missing_data_exits_with_missing_input() {
    let w = Workspace::new();
    let out = vwv(&["train", "--data", s(&w.path("absent")), "--out", s(&w.path("run"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn zero_episodes_keep_the_initial_weights() {
    let w = Workspace::new();
    ok(&["synth", "--config", s(&w.path("cfg.json")), "--out", s(&w.path("data"))]);
    ok(&[
        "train",
        "--data",
        s(&w.path("data")),
        "--out",
        s(&w.path("run")),
        "--episodes",
        "0",
        "--seed",
        "9",
    ]);
    let params = load_encoder(&w.path("run/checkpoint")).unwrap();
    assert_eq!(params, init_params(9, params.config));
    let csv = fs::read_to_string(w.path("run/loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

#[test]
fn pipeline_outputs_follow_the_contract() {
    let w = Workspace::trained();
    let losses = fs::read_to_string(w.path("run/loss.csv")).unwrap();
    assert_eq!(losses.lines().next(), Some("episode_index,loss"));
    assert_eq!(losses.lines().count(), 5);

    assert!(w.infer("pred", &["--confidence"]).status.success());
    for v in ["test_000", "test_001"] {
        let gt = read_mask(&mask_path(&w.path(&format!("data/test/{v}")), 0), None).unwrap();
        let dir = w.path(&format!("pred/{v}"));
        assert_eq!(read_mask(&mask_path(&dir, 0), None).unwrap(), gt);
        assert!(mask_path(&dir, 5).exists() && dir.join("conf_00005.pgm").exists());
        assert!(dir.join("adapt_log.csv").exists());
    }
    assert!(!w.path("pred/train_000").exists());

    ok(&[
        "eval",
        "--pred",
        s(&w.path("pred")),
        "--gt",
        s(&w.path("data")),
        "--out",
        s(&w.path("rep")),
    ]);
    let csv = fs::read_to_string(w.path("rep/report.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("video,object,J_mean,F_mean,JF_mean,J_decay"));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(w.path("rep/report.json")).unwrap()).unwrap();
    for key in ["objects", "j_mean", "f_mean", "jf_mean", "j_decay_mean"] {
        assert!(json.get(key).is_some(), "report lacks {key}");
    }
}

#[test]
fn long_interval_means_no_adaptation_rounds() {
    let w = Workspace::trained();
    fs::write(w.path("adapt.json"), r#"{"delta": 50}"#).unwrap();
    let adapt = w.path("adapt.json");
    assert!(w.infer("pred", &["--adapt-config", s(&adapt)]).status.success());
    let log = fs::read_to_string(w.path("pred/test_000/adapt_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn bbox_inference_ignores_the_mask() {
    let w = Workspace::trained();
    let video = w.path("data/test/test_000");
    let mask = read_mask(&mask_path(&video, 0), None).unwrap();
    // A four-episode encoder cannot separate object from background well
    // enough for the default resemblance threshold.
    fs::write(w.path("cfg.json"), r#"{"adapt": {"bg_resemblance_tau": 0.9999}}"#).unwrap();
    assert!(w.infer("a", &["--bbox"]).status.success());
    // Corrupting the frame-0 mask must not change box-initialised output.
    let mut flipped = mask.clone();
    flipped.labels.iter_mut().for_each(|l| *l = 1 - *l);
    write_mask(&mask_path(&video, 0), &flipped).unwrap();
    assert!(w.infer("b", &["--bbox"]).status.success());
    for t in 0..6 {
        let a = fs::read(mask_path(&w.path("a/test_000"), t)).unwrap();
        assert_eq!(a, fs::read(mask_path(&w.path("b/test_000"), t)).unwrap());
    }
    let resolved = fs::read_to_string(w.path("a/resolved-config.json")).unwrap();
    assert!(resolved.contains("\"supervision\": \"bbox\""));
}

#[test]
fn frame_count_mismatch_exits_with_data_error() {
    let w = Workspace::trained();
    assert!(w.infer("pred", &[]).status.success());
    fs::remove_file(mask_path(&w.path("pred/test_001"), 5)).unwrap();
    let out = vwv(&[
        "eval",
        "--pred",
        s(&w.path("pred")),
        "--gt",
        s(&w.path("data")),
        "--out",
        s(&w.path("rep")),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn ground_truth_scores_perfectly() {
    let w = Workspace::new();
    ok(&["synth", "--config", s(&w.path("cfg.json")), "--out", s(&w.path("data"))]);
    let out = vwv(&[
        "eval",
        "--pred",
        s(&w.path("data/test")),
        "--gt",
        s(&w.path("data")),
        "--out",
        s(&w.path("rep")),
    ]);
    assert!(out.status.success());
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(w.path("rep/report.json")).unwrap()).unwrap();
    assert_eq!(json["jf_mean"].as_f64(), Some(1.0));
}

fn ablation_rows(w: &Workspace, sweep: &str) -> Vec<String> {
    let out = w.path(&format!("ablate_{sweep}"));
    ok(&[
        "ablate",
        "--data",
        s(&w.path("data")),
        "--checkpoint",
        s(&w.path("run")),
        "--sweep",
        sweep,
        "--config",
        s(&w.path("cfg.json")),
        "--out",
        s(&out),
    ]);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().to_string())
        .collect()
}

#[test]
fn ablation_sweeps_have_the_listed_rows() {
    let w = Workspace::trained();
    assert_eq!(ablation_rows(&w, "k"), ["1", "2", "4", "8", "16"]);
    assert_eq!(ablation_rows(&w, "delta"), ["NA", "10", "5", "2", "1"]);
    assert_eq!(ablation_rows(&w, "repr"), ["prototype", "nearest_neighbor", "words"]);
}

#[test]
fn resolved_config_reproduces_outputs() {
    let w = Workspace::trained();
    let resolved = w.path("run/resolved-config.json");
    ok(&[
        "train",
        "--data",
        s(&w.path("data")),
        "--config",
        s(&resolved),
        "--out",
        s(&w.path("run2")),
    ]);
    for f in [
        "loss.csv",
        "checkpoint/conv0.weight.vwt",
        "checkpoint/proj.weight.vwt",
        "resolved-config.json",
    ] {
        assert_eq!(
            fs::read(w.path("run").join(f)).unwrap(),
            fs::read(w.path("run2").join(f)).unwrap(),
            "{f}"
        );
    }
}
