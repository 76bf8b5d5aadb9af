use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use camac_cli::config::{parse_config, validate_config, ConfigError, Profile, RunConfig};
use camac_core::metrics::read_reports;

fn camac(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_camac"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("CAMAC_THREADS", t),
        None => cmd.env_remove("CAMAC_THREADS"),
    };
    cmd.output().expect("binary runs")
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// A desk config small enough that a few episodes already run batch updates.
fn quick_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::for_profile(Profile::Desk);
    cfg.trainer.episodes = 3;
    cfg.trainer.b_min = 64;
    cfg.trainer.batch_size = 32;
    cfg.trainer.target_sync = 50;
    cfg.evaluation.episodes = 2;
    let path = dir.join("quick.json");
    fs::write(&path, cfg.canonical_json()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn shipped_configs_are_valid() {
    for (name, profile) in [("desk.json", Profile::Desk), ("paper.json", Profile::Paper)] {
        let cfg = validate_config(&configs_dir().join(name), Profile::Desk).unwrap();
        assert_eq!(cfg, RunConfig::for_profile(profile));
    }
}

#[test]
fn config_errors_are_complete_and_named() {
    let mut cfg = RunConfig::for_profile(Profile::Desk);
    cfg.scenario.tier_mix.level2 -= 0.1;
    cfg.trainer.batch_size = 600;
    let text = cfg.canonical_json();
    let Err(ConfigError::Invalid(vs)) = parse_config(&text, Profile::Desk) else { panic!("must be rejected") };
    let fields: Vec<&str> = vs.iter().map(|v| v.field.as_str()).collect();
    assert!(fields.contains(&"scenario.tier_mix"), "{fields:?}");
    let cross = vs.iter().find(|v| v.field == "trainer.batch_size").unwrap();
    assert!(cross.message.contains("batch_size") && cross.message.contains("b_min"), "{}", cross.message);

    let Err(ConfigError::Parse(msg)) = parse_config("{\n  \"trainer\": {\n    \"lr\": oops\n  }\n}", Profile::Desk) else {
        panic!("must fail to parse")
    };
    assert!(msg.contains("line 3"), "{msg}");
    assert!(matches!(parse_config("{\"colour\": 1}", Profile::Desk), Err(ConfigError::Parse(_))));

    let partial = parse_config("{\"profile\": \"paper\", \"trainer\": {\"episodes\": 4}}", Profile::Desk).unwrap();
    assert_eq!(partial.scenario.n_evs, 250);
    assert_eq!(partial.trainer.episodes, 4);
}

#[test]
fn train_is_byte_identical_across_runs_and_manifest_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for out in [&a, &b] {
        let o = camac(&["train", "--config", s(&cfg), "--seed", "7", "--out", s(out)], None);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(o.stdout.is_empty(), "data files carry the output, not stdout");
        assert_eq!(String::from_utf8_lossy(&o.stderr).lines().count(), 3, "one log line per episode");
    }
    for f in ["trace.csv", "checkpoint.json", "manifest.json", "config.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);

    // Replaying from the recorded config reproduces the run.
    let o = camac(&["train", "--config", s(&a.join("config.json")), "--seed", "7", "--out", s(&c)], None);
    assert!(o.status.success());
    for f in ["trace.csv", "checkpoint.json", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(c.join(f)).unwrap(), "{f}");
    }

    let other = dir.path().join("other");
    assert!(camac(&["train", "--config", s(&cfg), "--seed", "8", "--out", s(&other)], None).status.success());
    assert_ne!(fs::read(a.join("trace.csv")).unwrap(), fs::read(other.join("trace.csv")).unwrap());

    let ev = dir.path().join("ev");
    let o = camac(&["evaluate", "--config", s(&cfg), "--checkpoint", s(&a.join("checkpoint.json")), "--out", s(&ev)], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_reports(&ev.join("report.json")).unwrap().len(), 1);
    assert_eq!(fs::read_to_string(ev.join("evaluation.csv")).unwrap().lines().count(), 3);
}

#[test]
fn compare_emits_one_report_per_algorithm_and_seed_regardless_of_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}"));
        let o = camac(
            &["compare", "--config", s(&cfg), "--episodes", "1", "--algorithms", "cama,dqn,ucb,greedy,random", "--seeds", "5", "--out", s(&out)],
            Some(threads),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(out);
    }
    let reports = read_reports(&outputs[0].join("report.json")).unwrap();
    assert_eq!(reports.len(), 25);
    for (k, r) in reports.iter().enumerate() {
        assert_eq!(r.seed, 7 + (k / 5) as u64);
    }
    for f in ["report.json", "curves.csv", "summary.csv", "manifest.json"] {
        assert_eq!(fs::read(outputs[0].join(f)).unwrap(), fs::read(outputs[1].join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read_to_string(outputs[0].join("curves.csv")).unwrap().lines().count(), 1 + 5);

    let o = camac(&["report", "--out", s(&outputs[0])], None);
    assert!(o.status.success());
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("cama") && table.contains("published, not reproduced"));
}

#[test]
fn compare_without_greedy_still_scores_against_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let out = dir.path().join("out");
    let o = camac(&["compare", "--config", s(&cfg), "--episodes", "1", "--algorithms", "random", "--seeds", "2", "--out", s(&out)], Some("2"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let reports = read_reports(&out.join("report.json")).unwrap();
    assert_eq!(reports.iter().map(|r| r.algorithm.name()).collect::<Vec<_>>(), vec!["random", "random"]);
}

#[test]
fn input_problems_exit_one_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("missing.json");
    let o = camac(&["train", "--config", s(&missing), "--out", s(&out)], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"trainer\": {\"batch_size\": 999, \"gamma\": 1.5}}").unwrap();
    let o = camac(&["compare", "--config", s(&bad), "--out", s(&out)], None);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("trainer.batch_size") && err.contains("trainer.gamma"), "{err}");
    assert!(!out.exists());

    let o = camac(&["train", "--frobnicate", "--out", s(&out)], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    for args in [
        vec!["evaluate", "--checkpoint", s(&missing), "--out", s(&out)],
        vec!["report", "--out", s(&out)],
        vec!["train", "--algorithms", "ucb", "--out", s(&out)],
        vec!["simulate", "--algorithms", "cama", "--out", s(&out)],
    ] {
        assert_eq!(camac(&args, None).status.code(), Some(1), "{args:?}");
        assert!(!out.exists(), "{args:?}");
    }
    assert_eq!(camac(&["compare", "--out", s(&out)], Some("zero")).status.code(), Some(1));
    assert_eq!(camac(&["--help"], None).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let trained = dir.path().join("trained");
    assert!(camac(&["train", "--config", s(&cfg), "--episodes", "1", "--out", s(&trained)], None).status.success());
    // A desk checkpoint cannot score the paper-scale fleet.
    let o = camac(
        &["evaluate", "--profile", "paper", "--episodes", "1", "--checkpoint", s(&trained.join("checkpoint.json")), "--out", s(&dir.path().join("ev"))],
        None,
    );
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn simulate_writes_step_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let o = camac(&["simulate", "--episodes", "2", "--algorithms", "random", "--seed", "4", "--out", s(&out)], None);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(out.join("steps.csv")).unwrap().lines().count(), 1 + 2 * 96);
    assert_eq!(fs::read_to_string(out.join("trace.csv")).unwrap().lines().count(), 3);
}
