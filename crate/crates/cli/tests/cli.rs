use std::path::Path;
use std::process::{Command, Output};

fn dprm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dprm"))
        .args(args)
        .env_remove("DPRM_OUT")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{
  "target": {"kind": "random", "vocab": 3, "response_len": 3, "prompts": 2, "prompt_len": 1},
  "reward": {"kind": "hamming", "reference": [0, 1, 2]},
  "controller": {"kind": "dprm", "gate": {"t_warm": 5, "t_switch": 20, "n_ready": 4}},
  "train": {"steps": 80, "batch_size": 4, "phases": 3, "reuse": 4}
}"#;

fn train_tiny(dir: &Path, seed: &str, extra: &[&str]) -> Output {
    let cfg = dir.join("cfg.json");
    std::fs::write(&cfg, TINY).unwrap();
    let mut args = vec!["train", "--config", s(&cfg), "--seed", seed];
    args.extend_from_slice(extra);
    dprm(&args)
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let out = dprm(&["train", "--config", "/nonexistent/run.json", "--out", "/tmp/unused-dprm"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/run.json"));
}

#[test]
fn unknown_experiment_exits_2_and_lists_names() {
    let dir = tempfile::tempdir().unwrap();
    let out = dprm(&["experiment", "nope", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("alignment") && err.contains("softbon-rate"), "{err}");
}

#[test]
fn bad_flag_is_a_usage_error() {
    assert_eq!(dprm(&["train", "--bogus"]).status.code(), Some(2));
}

#[test]
fn train_then_decode_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = train_tiny(dir.path(), "3", &["--out", s(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.json", "telemetry.csv", "snapshot.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let dec = dir.path().join("dec");
    let out = dprm(&[
        "decode",
        "--checkpoint",
        s(&run.join("checkpoint.json")),
        "--samples",
        "4",
        "--force-full-gate",
        "--out",
        s(&dec),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let decoded: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dec.join("decoded.json")).unwrap()).unwrap();
    let samples = decoded["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 4);
    let mut streams: Vec<u64> = samples.iter().map(|x| x["stream"].as_u64().unwrap()).collect();
    streams.sort_unstable();
    streams.dedup();
    assert_eq!(streams.len(), 4);
    assert_eq!(decoded["force_full_gate"], true);
    // one reveal per step over a length-3 response
    assert!(samples.iter().all(|x| x["trace"].as_array().unwrap().len() == 3));
    let trace = std::fs::read_to_string(dec.join("trace.csv")).unwrap();
    assert!(trace.starts_with("config_hash,seed,version,sample"));
}

#[test]
fn corrupt_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("ckpt.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let out = dprm(&["decode", "--checkpoint", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train_tiny(dir.path(), "5", &["--out", s(&a)]).status.success());
    assert!(train_tiny(dir.path(), "5", &["--out", s(&b)]).status.success());
    for f in ["checkpoint.json", "telemetry.csv", "snapshot.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn worker_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("p.json");
    std::fs::write(&params, r#"{"instances": 6}"#).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (out, workers) in [(&a, "1"), (&b, "4")] {
        let o = dprm(&[
            "--workers",
            workers,
            "experiment",
            "alignment",
            "--config",
            s(&params),
            "--out",
            s(out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["alignment.json", "alignment.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn failing_hard_check_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    // a tolerance no trained model can meet
    let params = dir.path().join("p.json");
    std::fs::write(&params, r#"{"instances": 1, "schedule": [[1.0, 10]], "tolerance": 0.0}"#).unwrap();
    let out = dprm(&["experiment", "minimizer-preservation", "--config", s(&params), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(dir.path().join("minimizer-preservation.json").exists());
}

#[test]
fn oracle_dump_and_snapshot_tools() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("oracle.json");
    std::fs::write(
        &cfg,
        r#"{"target": {"kind": "point_mass", "vocab": 2, "response": [1, 0]},
            "reward": {"kind": "exact_match", "reference": [1, 0]}, "beta": 1.0}"#,
    )
    .unwrap();
    let out = dprm(&["oracle", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dump: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("oracle.json")).unwrap()).unwrap();
    assert!((dump["partition"].as_f64().unwrap() - 1f64.exp()).abs() < 1e-12);

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train_tiny(dir.path(), "1", &["--out", s(&a)]).status.success());
    assert!(train_tiny(dir.path(), "2", &["--out", s(&b)]).status.success());
    let merged = dir.path().join("merged.json");
    let out = dprm(&[
        "snapshot",
        "merge",
        s(&a.join("snapshot.json")),
        s(&b.join("checkpoint.json")),
        "--out",
        s(&merged),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let total = |p: &Path| -> u64 {
        let o = dprm(&["snapshot", "inspect", s(p)]);
        assert!(o.status.success());
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        v["total_count"].as_u64().unwrap()
    };
    assert_eq!(total(&merged), total(&a.join("snapshot.json")) + total(&b.join("snapshot.json")));
}
