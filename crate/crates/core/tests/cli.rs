use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn manet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_manet")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// A synthetic dataset and a briefly trained checkpoint shared by the tests.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    ckpt: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let o = manet(&["synth", "--out", data.to_str().unwrap(), "--classes", "4", "--per-class", "6", "--size", "64", "--seed", "2"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let run = dir.path().join("run");
        let o = manet(&[
            "train", "--dataset", data.join("manifest.json").to_str().unwrap(), "--out", run.to_str().unwrap(), "--side", "64",
            "--grid", "6", "--head-channels", "16", "--epochs", "1", "--episodes-per-epoch", "4", "--batch", "2", "--workers", "0",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        Fixture { ckpt: run.join("checkpoint.bin"), data, _dir: dir }
    })
}

#[test]
fn help_documents_every_flag() {
    let o = manet(&["--help"]);
    assert_eq!(code(&o), 0);
    for sub in ["synth", "train", "eval", "viz"] {
        assert!(stdout(&o).contains(sub));
        let o = manet(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub} --help");
        let text = stdout(&o);
        let lines: Vec<&str> = text.lines().collect();
        for (i, l) in lines.iter().enumerate() {
            let t = l.trim_start();
            if t.starts_with("--") && !t.starts_with("--help") {
                let described = t.split("  ").filter(|s| !s.trim().is_empty()).count() > 1
                    || lines.get(i + 1).is_some_and(|n| !n.trim().is_empty() && !n.trim_start().starts_with('-'));
                assert!(described, "{sub}: flag without description: {t}");
            }
        }
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&manet(&["synth"])), 1);
    assert_eq!(code(&manet(&["synth", "--out", "x", "--bogus"])), 1);
    assert_eq!(code(&manet(&["frobnicate"])), 1);
    assert_eq!(code(&manet(&["train", "--grid", "many"])), 1);
    assert_eq!(code(&manet(&["train", "--lambda", "1", "--no-grid-loss"])), 1);
}

#[test]
fn bad_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"learning_rate": 0.1}"#).unwrap();
    let o = manet(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::write(&cfg, r#"{"model": {"grid": 2}}"#).unwrap();
    assert_eq!(code(&manet(&["train", "--config", cfg.to_str().unwrap()])), 1);
    assert_eq!(code(&manet(&["train", "--config", dir.path().join("missing.json").to_str().unwrap()])), 1);
}

#[test]
fn missing_checkpoint_exits_two() {
    let o = manet(&["eval", "--ckpt", "/nonexistent/checkpoint.bin"]);
    assert_eq!(code(&o), 2);
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"MANETCKP garbage").unwrap();
    assert_eq!(code(&manet(&["eval", "--ckpt", junk.to_str().unwrap()])), 2);
}

#[test]
fn synth_counts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = |out: &Path| {
        let o = manet(&["synth", "--classes", "8", "--per-class", "20", "--size", "128", "--seed", "1", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
    };
    args(&a);
    args(&b);
    let ta = tree(&a);
    assert_eq!(ta.iter().filter(|(p, _)| p.starts_with("images")).count(), 160);
    assert_eq!(ta.iter().filter(|(p, _)| p.starts_with("masks")).count(), 160);
    assert_eq!(ta, tree(&b));
    // rerun into the same directory overwrites with the same bytes
    args(&a);
    assert_eq!(tree(&a), ta);
}

#[test]
fn train_writes_artifacts() {
    let f = fixture();
    let run = f.ckpt.parent().unwrap();
    for name in ["config.json", "train_log.jsonl", "checkpoint_epoch001.bin", "checkpoint.bin"] {
        assert!(run.join(name).exists(), "{name}");
    }
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["model"]["grid"], 6);
    assert_eq!(std::fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count(), 2);
}

#[test]
fn eval_reports_every_run() {
    let f = fixture();
    let ck = f.ckpt.to_str().unwrap();
    let o = manet(&["eval", "--ckpt", ck, "--fold", "0", "--shots", "1", "--episodes", "20", "--runs", "5", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let json: serde_json::Value = serde_json::from_str(&out[out.find('{').unwrap()..]).unwrap();
    assert_eq!(json["runs"].as_array().unwrap().len(), 5);
    assert_eq!(json["runs"][0]["seed"], 3);
    assert_eq!(json["runs"][4]["seed"], 7);
    assert!(json["head_params"].as_u64().unwrap() > 0);
    assert!(json["config"]["model"].is_object());

    let o = manet(&["eval", "--ckpt", ck, "--shots", "5", "--episodes", "8", "--runs", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("\"shots\": 5"));
}

#[test]
fn iou_modes_are_labelled() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    for mode in ["pooled", "mean"] {
        let report = dir.path().join(format!("{mode}.json"));
        let o = manet(&["eval", "--ckpt", f.ckpt.to_str().unwrap(), "--episodes", "8", "--runs", "1", "--iou-mode", mode, "--out", report.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
        assert!(stdout(&o).contains(mode));
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
        assert_eq!(json["iou_mode"], mode);
    }
}

#[test]
fn eval_is_idempotent() {
    let f = fixture();
    let args = ["eval", "--ckpt", f.ckpt.to_str().unwrap(), "--episodes", "16", "--runs", "2", "--workers", "0"];
    assert_eq!(manet(&args).stdout, manet(&args).stdout);
}

fn episode_spec(f: &Fixture, dir: &Path, body: Option<&str>) -> PathBuf {
    let spec = dir.join("episode.json");
    let data = f.data.to_str().unwrap();
    let text = body.map(str::to_owned).unwrap_or_else(|| {
        format!(
            r#"{{"query": {{"image": "{data}/images/disk_0000.png", "mask": "{data}/masks/disk_0000.png"}},
                "support": [{{"image": "{data}/images/disk_0001.png", "mask": "{data}/masks/disk_0001.png"}}]}}"#
        )
    });
    std::fs::write(&spec, text).unwrap();
    spec
}

#[test]
fn viz_montage_layout() {
    let f = fixture();
    let names: Vec<String> = std::fs::read_dir(f.data.join("images")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert!(names.contains(&"disk_0000.png".to_string()), "{names:?}");
    let dir = tempfile::tempdir().unwrap();
    let spec = episode_spec(f, dir.path(), None);
    for (fg_only, sub) in [(false, "all"), (true, "fg")] {
        let out = dir.path().join(sub);
        let mut args = vec!["viz", "--ckpt", f.ckpt.to_str().unwrap(), "--episode", spec.to_str().unwrap(), "--tile-size", "10", "--out", out.to_str().unwrap()];
        if fg_only {
            args.push("--fg-only");
        }
        let o = manet(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let montage = image::open(out.join("montage.png")).unwrap();
        assert_eq!((montage.width(), montage.height()), (60, 60));
        assert!(out.join("overlay.png").exists() && out.join("mask.png").exists() && out.join("config.json").exists());
    }
    let all = image::open(dir.path().join("all/montage.png")).unwrap().to_rgb8();
    let fg = image::open(dir.path().join("fg/montage.png")).unwrap().to_rgb8();
    // hidden tiles are black, shown tiles are drawn identically
    for (a, b) in all.pixels().zip(fg.pixels()) {
        assert!(b == a || b.0 == [0, 0, 0]);
    }
}

#[test]
fn bad_episode_spec_exits_one() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    for body in [r#"{"query": 3}"#, r#"{"query": {"image": "a.png", "mask": "b.png"}, "support": []}"#, "not json"] {
        let spec = episode_spec(f, dir.path(), Some(body));
        let o = manet(&["viz", "--ckpt", f.ckpt.to_str().unwrap(), "--episode", spec.to_str().unwrap(), "--out", dir.path().join("v").to_str().unwrap()]);
        assert_eq!(code(&o), 1, "{body}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = manet(&["viz", "--ckpt", f.ckpt.to_str().unwrap(), "--episode", dir.path().join("none.json").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}
