use std::fs;
use std::path::{Path, PathBuf};

use qsme_robust::cli::{parse_scenario, render_scenario, run};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn qsme(args: &[&str]) -> i32 {
    run(std::iter::once("qsme").chain(args.iter().copied()))
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn fixtures_round_trip() {
    for name in ["decay.toml", "iss_qubit.toml", "feedback_qubit.toml", "dephasing.toml"] {
        let cfg = parse_scenario(&fs::read_to_string(fixture(name)).unwrap()).unwrap();
        let text = render_scenario(&cfg).unwrap();
        assert_eq!(parse_scenario(&text).unwrap(), cfg, "{name}");
        cfg.build().unwrap();
    }
}

#[test]
fn did_on_dephasing_exits_one() {
    let out = tempfile::tempdir().unwrap();
    let code = qsme(&[
        "did",
        "--config",
        fixture("dephasing.toml").to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(out.path().join("did.json")).unwrap()).unwrap();
    assert_eq!(doc["failure_stage"], 0);
    assert_eq!(doc["gas"], false);
}

#[test]
fn did_on_decay_exits_zero() {
    let out = tempfile::tempdir().unwrap();
    let code = qsme(&[
        "did",
        "--config",
        fixture("decay.toml").to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
}

#[test]
fn unknown_subcommand_exits_two() {
    assert_eq!(qsme(&["frobnicate"]), 2);
}

#[test]
fn missing_config_exits_two() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(qsme(&["did", "--out", out.path().to_str().unwrap()]), 2);
    assert_eq!(
        qsme(&[
            "did",
            "--config",
            "/nonexistent.toml",
            "--out",
            out.path().to_str().unwrap()
        ]),
        2
    );
}

#[test]
fn invalid_scenario_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = fs::read_to_string(fixture("decay.toml"))
        .unwrap()
        .replace("eta = 0.5", "eta = 1.5");
    let path = dir.path().join("bad.toml");
    fs::write(&path, bad).unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        qsme(&[
            "simulate",
            "--config",
            path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        2
    );
}

#[test]
fn verify_bounds_on_iss_qubit_passes_and_emits_csv() {
    let out = tempfile::tempdir().unwrap();
    let code = qsme(&[
        "verify-bounds",
        "--config",
        fixture("iss_qubit.toml").to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(out.path().join("bound_00_iss_mean.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,empirical,bound,margin"));
    assert_eq!(lines.count(), 31);
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(out.path().join("summary.json")).unwrap()).unwrap();
    let keys: Vec<&str> = summary[0].as_object().unwrap().keys().map(|s| s.as_str()).collect();
    assert_eq!(keys, ["bound_name", "satisfied", "parameters", "slacks"]);
}

#[test]
fn check_invariance_reports_condition_a() {
    let out = tempfile::tempdir().unwrap();
    let code = qsme(&[
        "check-invariance",
        "--config",
        fixture("iss_qubit.toml").to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    // sigma_x noise pumps population out of the target
    assert_eq!(code, 1);
    let doc: serde_json::Value =
        serde_json::from_slice(&fs::read(out.path().join("invariance.json")).unwrap()).unwrap();
    assert_eq!(doc["nominal"]["holds"], true);
    assert_eq!(doc["condition_a"]["holds"], false);
}

#[test]
fn trajectory_csv_layout() {
    let out = tempfile::tempdir().unwrap();
    let code = qsme(&[
        "simulate",
        "--config",
        fixture("decay.toml").to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(out.path().join("trajectory.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "t,d0_true,d0_filter,u,dY_1");
    assert_eq!(rows[1], "0,1,,0,");
    assert_eq!(rows.len(), 2 + 2000);
    let names: Vec<String> = files(out.path()).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["manifest.json", "trajectory.csv"]);
}

#[test]
fn seed_override_changes_the_record() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = fixture("decay.toml");
    assert_eq!(
        qsme(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            a.path().to_str().unwrap()
        ]),
        0
    );
    assert_eq!(
        qsme(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "12",
            "--out",
            b.path().to_str().unwrap()
        ]),
        0
    );
    assert_ne!(
        fs::read(a.path().join("trajectory.csv")).unwrap(),
        fs::read(b.path().join("trajectory.csv")).unwrap()
    );
    let m: serde_json::Value = serde_json::from_slice(&fs::read(b.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 12);
}

#[test]
fn manifest_replay_is_bit_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = fixture("feedback_qubit.toml");
    assert_eq!(
        qsme(&[
            "feedback-sim",
            "--config",
            cfg.to_str().unwrap(),
            "--threads",
            "1",
            "--out",
            a.path().to_str().unwrap()
        ]),
        0
    );
    let manifest = a.path().join("manifest.json");
    assert_eq!(
        qsme(&[
            "feedback-sim",
            "--manifest",
            manifest.to_str().unwrap(),
            "--threads",
            "4",
            "--out",
            b.path().to_str().unwrap()
        ]),
        0
    );
    assert_eq!(files(a.path()), files(b.path()));
}

#[test]
fn manifest_for_another_subcommand_is_rejected() {
    let a = tempfile::tempdir().unwrap();
    let cfg = fixture("decay.toml");
    assert_eq!(
        qsme(&[
            "did",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            a.path().to_str().unwrap()
        ]),
        0
    );
    let manifest = a.path().join("manifest.json");
    assert_eq!(
        qsme(&[
            "simulate",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            a.path().to_str().unwrap()
        ]),
        2
    );
}
