use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn pdscale(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdscale")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config(name: &str) -> String {
    repo().join("configs").join(name).display().to_string()
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// Writes a config that uses the shipped profile and trace.
fn scratch_config(dir: &Path, body: &str) -> String {
    let profile = repo().join("profiles/llama-3.1-8b-a100.json");
    let trace = repo().join("configs/traces/bursty-mixed.csv");
    let text = format!("profile = {:?}\nseed = 1\n{body}\n[trace]\npath = {:?}\n", profile, trace);
    let path = dir.join("c.toml");
    std::fs::write(&path, text).unwrap();
    path_str(&path)
}

#[test]
fn run_writes_reports() {
    let out = tempfile::tempdir().unwrap();
    let o = pdscale(&["run", "--config", &config("synthetic-burst.toml"), "--out", &path_str(out.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("summary.json")).unwrap()).unwrap();
    for key in ["slo_attainment_overall", "slo_attainment_ttft", "slo_attainment_tpot", "avg_gpus", "policy", "seed"] {
        assert!(summary.get(key).is_some(), "summary lacks {key}");
    }
    assert_eq!(summary["seed"], 3);
    let stdout: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stdout, summary);
    for f in ["requests.csv", "timeseries.csv", "decisions.csv"] {
        assert!(out.path().join(f).is_file(), "{f} missing");
    }
}

#[test]
fn runs_are_reproducible_and_seed_sensitive() {
    let run = |seed: &str| {
        let d = tempfile::tempdir().unwrap();
        let o = pdscale(&[
            "run",
            "--config",
            &config("synthetic-burst.toml"),
            "--seed",
            seed,
            "--out",
            &path_str(d.path()),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read(d.path().join("requests.csv")).unwrap()
    };
    let a = run("5");
    assert_eq!(a, run("5"));
    assert_ne!(a, run("6"));
}

#[test]
fn threshold_of_the_wrong_policy_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let c = scratch_config(dir.path(), "[policy.prefill]\nkind = \"utilization\"\nthreshold_rps = 14.0");
    let o = pdscale(&["run", "--config", &c]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("threshold_rps"), "{}", stderr(&o));
}

#[test]
fn exit_codes() {
    assert_eq!(code(&pdscale(&["--help"])), 0);
    assert_eq!(code(&pdscale(&["--version"])), 0);
    assert_eq!(code(&pdscale(&["frobnicate"])), 1);
    assert_eq!(code(&pdscale(&["run"])), 1);

    let dir = tempfile::tempdir().unwrap();
    let bad = scratch_config(dir.path(), "[cluster]\ninitial_prefillers = 0\n[routing]\npredictor_accuracy = 2.0");
    let o = pdscale(&["run", "--config", &bad]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("prefiller") && stderr(&o).contains("accuracy"), "{}", stderr(&o));

    let missing = path_str(&dir.path().join("absent.toml"));
    assert_eq!(code(&pdscale(&["run", "--config", &missing])), 2);

    // output path collides with a regular file
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let o = pdscale(&["run", "--config", &config("synthetic-burst.toml"), "--out", &path_str(&blocker)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn compare_prints_one_row_per_policy() {
    let out = tempfile::tempdir().unwrap();
    let o = pdscale(&[
        "compare",
        "--config",
        &config("token-velocity.toml"),
        "--config",
        &config("rps.toml"),
        "--out",
        &path_str(out.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3, "{table}");
    assert!(rows[1].starts_with("token_velocity") && rows[2].starts_with("rps"), "{table}");
    assert_eq!(std::fs::read_to_string(out.path().join("comparison.txt")).unwrap(), table);
    assert!(out.path().join("00-token_velocity/summary.json").is_file());
    assert!(out.path().join("01-rps/summary.json").is_file());
}

#[test]
fn compare_rejects_mismatched_runs() {
    let o =
        pdscale(&["compare", "--config", &config("token-velocity.toml"), "--config", &config("synthetic-burst.toml")]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("different trace") && err.contains("seed"), "{err}");
}

#[test]
fn ablate_runs_four_steps() {
    let out = tempfile::tempdir().unwrap();
    let o = pdscale(&["ablate", "--config", &config("ablation-base.toml"), "--out", &path_str(out.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let labels: Vec<String> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().next().unwrap().to_string())
        .collect();
    assert_eq!(labels, ["B", "B+P", "B+P+D", "Full"]);

    let o = pdscale(&["ablate", "--config", &config("token-velocity.toml"), "--out", &path_str(out.path())]);
    assert_eq!(code(&o), 1);
}

#[test]
fn analyze_trace_file() {
    let out = tempfile::tempdir().unwrap();
    let trace = config("traces/bursty-mixed.csv");
    let o = pdscale(&["analyze", "--trace", &trace, "--factors", "1,3", "--out", &path_str(out.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("burst.json")).unwrap()).unwrap();
    assert_eq!(report["requests"], 2141);
    let factors: Vec<f64> =
        report["excess"].as_array().unwrap().iter().map(|p| p["factor"].as_f64().unwrap()).collect();
    assert_eq!(factors, [1.0, 3.0]);

    assert_eq!(code(&pdscale(&["analyze", "--trace", &trace, "--factors", "0"])), 1);
    assert_eq!(code(&pdscale(&["analyze"])), 1);

    let bad = out.path().join("bad.csv");
    std::fs::write(&bad, "arrival_ms,input_tokens\n0,5\n").unwrap();
    let o = pdscale(&["analyze", "--trace", &path_str(&bad)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("output_tokens"), "{}", stderr(&o));
}

#[test]
fn analyze_synthesized_config() {
    let out = tempfile::tempdir().unwrap();
    let o = pdscale(&["analyze", "--config", &config("synthetic-burst.toml"), "--out", &path_str(out.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.path().join("burst.json").is_file());
}

#[test]
fn profile_round_trip() {
    let out = tempfile::tempdir().unwrap();
    let o =
        pdscale(&["profile", "--config", &config("profile-llama-3.1-8b-a100.toml"), "--out", &path_str(out.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let written = out.path().join("profile.json");
    let profile: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&written).unwrap()).unwrap();
    let shipped: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(repo().join("profiles/llama-3.1-8b-a100.json")).unwrap())
            .unwrap();
    for key in ["chunk_size", "expected_batch_size", "reserved_tokens", "kvc_capacity_tokens", "v_n"] {
        assert_eq!(profile[key], shipped[key], "{key}");
    }
    for (bucket, v) in shipped["v_d_per_bucket"].as_object().unwrap() {
        let got = profile["v_d_per_bucket"][bucket].as_f64().unwrap();
        let want = v.as_f64().unwrap();
        assert!((got / want - 1.0).abs() < 0.1, "{bucket}: {got} vs {want}");
    }

    // the written profile drives a run
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c.toml");
    let text = format!(
        "profile = {written:?}\n[trace.synthesis]\nsegments = [{{ start_ms = 0, end_ms = 5000, rps = 2.0 }}]\n"
    );
    std::fs::write(&c, text).unwrap();
    let o = pdscale(&["run", "--config", &path_str(&c), "--out", &path_str(&dir.path().join("o"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn profile_with_infeasible_slo_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let base = std::fs::read_to_string(config("profile-llama-3.1-8b-a100.toml")).unwrap();
    let c = dir.path().join("p.toml");
    std::fs::write(&c, base.replace("tpot_slo_ms = 100.0", "tpot_slo_ms = 30.0")).unwrap();
    let o = pdscale(&["profile", "--config", &path_str(&c), "--out", &path_str(dir.path())]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}
