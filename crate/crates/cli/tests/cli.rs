use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adafisher"))
        .args(args)
        .env("ADAFISHER_OUT", out_root)
        .current_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("../.."))
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write_config(dir: &Path, name: &str, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(configs().join("quadratic.json")).unwrap()).unwrap();
    edit(&mut v);
    let p = dir.join(name);
    std::fs::write(&p, v.to_string()).unwrap();
    p
}

#[test]
fn train_succeeds_and_prints_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("quadratic.json");
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out", "q"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["epochs"], 30);
    assert!(summary["train_loss"].as_f64().unwrap() < 1e-6);
    assert!(dir.path().join("q/metrics.jsonl").is_file());
    assert!(dir.path().join("q/trajectory.csv").is_file());
}

#[test]
fn config_problems_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(code(&run(&["train", "--config", missing.to_str().unwrap()], dir.path())), 2);

    let bad = write_config(dir.path(), "bad.json", |v| v["epochs"] = 0.into());
    assert_eq!(code(&run(&["train", "--config", bad.to_str().unwrap()], dir.path())), 2);

    let unknown = write_config(dir.path(), "unknown.json", |v| v["speed"] = "fast".into());
    let o = run(&["train", "--config", unknown.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("speed"));

    // Fisher oracles need a classification model.
    let cfg = configs().join("quadratic.json");
    assert_eq!(code(&run(&["oracle", "--config", cfg.to_str().unwrap()], dir.path())), 2);
}

#[test]
fn corrupt_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images.idx");
    let labels = dir.path().join("labels.idx");
    std::fs::write(&images, [0u8, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 3]).unwrap();
    std::fs::write(&labels, [0u8, 0, 8, 1, 0, 0, 0, 2, 0, 1]).unwrap();
    let cfg = write_config(dir.path(), "idx.json", |v| {
        v["model"] = serde_json::json!([{"type": "flatten"}, {"type": "dense", "out": 2}]);
        v["data"]["source"] = serde_json::json!({"type": "idx", "images": images, "labels": labels});
        v["batch_size"] = 1.into();
        v["data"]["train_fraction"] = 0.5.into();
    });
    let o = run(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));

    let csv = dir.path().join("t.csv");
    std::fs::write(&csv, "a,l\n1,0\nx,1\n").unwrap();
    let cfg = write_config(dir.path(), "csv.json", |v| {
        v["data"]["source"] = serde_json::json!({"type": "csv", "path": csv});
    });
    let o = run(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 3, column 1"));
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "hot.json", |v| {
        v["optimizer"] = serde_json::json!({"name": "adafisher", "lr": 1e6});
    });
    assert_eq!(code(&run(&["train", "--config", cfg.to_str().unwrap()], dir.path())), 4);
}

#[test]
fn snapshot_diagnose_oracle_and_distributed() {
    let dir = tempfile::tempdir().unwrap();
    let moons = configs().join("moons_ln.json");
    let moons = moons.to_str().unwrap();
    let o = run(&["train", "--config", moons, "--out", "m", "--snapshot"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let snap = dir.path().join("m/snapshot.json");
    assert!(snap.is_file());

    for (analysis, file) in [("gershgorin", "discs.csv"), ("fft", "snr.csv"), ("snr", "snr.csv"), ("fim", "fim_stats.csv")] {
        let out = dir.path().join(analysis);
        let o = run(
            &["diagnose", "--snapshot", snap.to_str().unwrap(), "--analysis", analysis, "--out", out.to_str().unwrap()],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{analysis}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join(file).is_file(), "{analysis} wrote no {file}");
    }
    let o = run(&["diagnose", "--snapshot", "/nonexistent.json", "--analysis", "fft"], dir.path());
    assert_eq!(code(&o), 3);

    let out = dir.path().join("oracle");
    let o = run(&["oracle", "--config", moons, "--probe", "1", "--out", out.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    // A single input makes the Kronecker product exact.
    assert!(v["mae"].as_f64().unwrap() < 1e-12);
    assert!(out.join("fisher.csv").is_file());
    let o = run(&["oracle", "--config", moons, "--mode", "mc", "--samples", "50", "--out", out.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0);

    let o = run(&["distributed", "--config", moons, "--workers", "5", "--out", "d"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let first = std::fs::read_to_string(dir.path().join("d/metrics.jsonl")).unwrap();
    assert!(first.lines().next().unwrap().contains("\"workers\":5"));
    let o = run(&["distributed", "--config", moons, "--workers", "51"], dir.path());
    assert_eq!(code(&o), 2);
}
