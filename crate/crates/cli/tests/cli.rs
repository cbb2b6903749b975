use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

/// Small enough to train in a couple of seconds.
const FAST: &[&str] = &[
    "training.warmup.d1_pairs=300",
    "training.warmup.d2_count=60",
    "training.warmup.plant_epochs=10",
    "training.warmup.d2_epochs=50",
    "training.schedule.query_count=60",
    "training.schedule.epochs_per_iteration=5",
    "training.schedule.max_iterations=4",
];

fn ttr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttr")).args(args).output().unwrap()
}

fn with_config(cmd: &str, dir: &Path, extra: &[&str], overrides: &[&str]) -> Output {
    let out = format!("output_dir={}", serde_json::to_string(dir).unwrap());
    let mut args = vec![cmd.to_string(), "--set".into(), out];
    for o in FAST.iter().chain(overrides) {
        args.push("--set".into());
        args.push(o.to_string());
    }
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ttr(&refs)
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn oracle_prints_the_exact_time() {
    let o = ttr(&["oracle", "--from", "-12,5,2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let t = v["time"].as_f64().unwrap();
    assert!((t - 14.8634).abs() < 5e-5, "{v}");
    assert_eq!(v["word"], "RSL");
}

#[test]
fn bad_arguments_exit_with_2() {
    assert_eq!(code(&ttr(&["oracle", "--from", "1,2"])), 2);
    assert_eq!(code(&ttr(&["oracle", "--from", "a,b,c"])), 2);
    assert_eq!(code(&ttr(&["frobnicate"])), 2);
    let o = ttr(&["warmup", "--set", "training.nonsense=1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("training.nonsense"), "{}", stderr(&o));
    let o = ttr(&["warmup", "--set", "training.schedule.stop_fraction=2"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("stop_fraction"), "{}", stderr(&o));
}

#[test]
fn missing_config_fields_are_named() {
    let tmp = TempDir::new().unwrap();
    let o = with_config("warmup", tmp.path(), &[], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut cfg: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("config.json")).unwrap()).unwrap();
    cfg.as_object_mut().unwrap().remove("x_bar");
    let path = tmp.path().join("broken.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let o = ttr(&["warmup", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("x_bar"), "{}", stderr(&o));
    assert_eq!(code(&ttr(&["warmup", "--config", "/nonexistent/run.json"])), 2);
}

#[test]
fn runtime_failures_exit_with_3() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("none.csv");
    let o = with_config("synthesize", tmp.path(), &["--corridor", missing.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let o = with_config("corridor", tmp.path(), &["--dataset", missing.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("none.csv"), "{}", stderr(&o));
}

#[test]
fn warmup_writes_both_datasets() {
    let tmp = TempDir::new().unwrap();
    let dir = serde_json::to_string(tmp.path()).unwrap();
    let o = ttr(&["warmup", "--set", &format!("output_dir={dir}")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let d2 = fs::read_to_string(tmp.path().join("d2.csv")).unwrap();
    assert!(d2.starts_with("px,py,theta,cost,K,"));
    assert_eq!(d2.lines().count(), 301);
    let d1 = fs::read_to_string(tmp.path().join("d1.csv")).unwrap();
    assert_eq!(d1.lines().count(), 2_001);
    let stats: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("warmup_stats.json")).unwrap()).unwrap();
    assert_eq!(stats["d2_samples"], 300);
    let rate = stats["d2_acceptance"].as_f64().unwrap();
    assert!(rate > 0.0 && rate <= 1.0);
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn training_is_seeded_and_resumable() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let c = TempDir::new().unwrap();
    assert_eq!(code(&with_config("train", a.path(), &["-q"], &[])), 0);

    // same seed, separate process
    assert_eq!(code(&with_config("train", c.path(), &["-q"], &[])), 0);
    for f in ["dataset.csv", "weights.json", "train_log.jsonl"] {
        assert_eq!(read(a.path(), f), read(c.path(), f), "{f}");
    }

    // interrupted after two iterations, then resumed
    let o = with_config("train", b.path(), &["-q", "--stop-after", "2"], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!b.path().join("dataset.csv").exists());
    assert_eq!(String::from_utf8(read(b.path(), "train_log.jsonl")).unwrap().lines().count(), 2);
    let snap = b.path().join("snapshot.json");
    let o = with_config("train", b.path(), &["-q", "--resume", snap.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["dataset.csv", "weights.json", "train_log.jsonl"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }

    // a snapshot cannot be resumed towards another state
    let o = with_config("train", b.path(), &["-q", "--resume", snap.to_str().unwrap()], &["x_bar=[1,1,1]"]);
    assert_eq!(code(&o), 2);

    // a different seed gives a different run
    let d = TempDir::new().unwrap();
    assert_eq!(code(&with_config("train", d.path(), &["-q"], &["training.seed=1"])), 0);
    assert_ne!(read(a.path(), "dataset.csv"), read(d.path(), "dataset.csv"));
}

#[test]
fn full_pipeline() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&with_config("train", dir, &["-q"], &[])), 0);
    // the warm-up set is kept next to the trained one
    assert_eq!(String::from_utf8(read(dir, "d2.csv")).unwrap().lines().count(), 61);

    let o = with_config("corridor", dir, &[], &["corridor.include_warmup=false"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let trained_only = String::from_utf8(read(dir, "corridor.csv")).unwrap().lines().count();
    let o = with_config("corridor", dir, &[], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let corridor = String::from_utf8(read(dir, "corridor.csv")).unwrap();
    assert!(corridor.lines().count() > trained_only);
    assert!(corridor.starts_with("px,py,theta,t,value,sample_idx\n"));
    let meta: serde_json::Value = serde_json::from_slice(&read(dir, "corridor.json")).unwrap();
    assert_eq!(meta["spacing"], 0.1);

    let o = with_config("evaluate", dir, &["--state", "-10,0,0", "--state=-9,0.5,0"], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let eval = String::from_utf8(read(dir, "evaluation.csv")).unwrap();
    assert_eq!(eval.lines().count(), 3);
    assert!(eval.starts_with("state,v_hat,oracle_v,ratio,conservative,support_distance\n"));
    // values read off stored points are never below the optimum
    assert!(eval.lines().skip(1).all(|l| l.contains(",true,")), "{eval}");

    let o = with_config("synthesize", dir, &["--from", "-10,0,0", "--from", "30,30,0"], &[]);
    // the second start lies far outside the corridor
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let rows: serde_json::Value = serde_json::from_slice(&read(dir, "rollouts.json")).unwrap();
    assert_eq!(rows[1]["outcome"], "FAIL_LOST");
    assert!(rows[0]["oracle_time"].as_f64().unwrap() == 10.0);
    let traj = String::from_utf8(read(dir, "rollout_0.csv")).unwrap();
    assert!(traj.starts_with("t,px,py,theta\n"));

    let svg = dir.join("view.svg");
    let o = ttr(&[
        "plot",
        "--corridor",
        dir.join("corridor.csv").to_str().unwrap(),
        "--trajectory",
        dir.join("rollout_0.csv").to_str().unwrap(),
        "--contours",
        "0",
        "-o",
        svg.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(svg).unwrap();
    assert!(text.starts_with("<svg") && text.contains("<polyline"));
}
