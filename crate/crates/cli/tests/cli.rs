use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_pi2dof");

const TINY_CONFIG: &str = r#"{
  "plant": {"n": 6, "m": 2, "p": 2, "system_seeds": [1, 2]},
  "trials": 2,
  "feedforward": {"tau_u": 20},
  "zo": {"n_dirs": 3, "n_sub": 2, "tau": 5},
  "pgd": {"iterations": 2},
  "baseline": {"iterations": 200},
  "eval": {"n_eval": 5, "tau_eval": 20},
  "trajectory": {"horizon": 5}
}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    run(dir, args).status.code().expect("exit code")
}

/// Runs every subcommand once into `out/` and returns the written files.
fn pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fs::write(dir.join("tiny.json"), TINY_CONFIG).unwrap();
    let c = ["--config", "tiny.json", "--out-dir", "out"];
    let with = |extra: &[&'static str]| -> Vec<&str> { c.iter().copied().chain(extra.iter().copied()).collect() };
    ok(dir, &with(&["--seed", "3", "gen-system", "--n", "6"]));
    ok(dir, &with(&["--seed", "1", "feedforward", "--plant", "out/plant.json", "--tau-u", "20"]));
    ok(
        dir,
        &with(&["--seed", "1", "feedforward", "--plant", "out/plant.json", "--tau-u", "auto", "--out", "ff_auto.json"]),
    );
    ok(
        dir,
        &with(&[
            "--seed",
            "1",
            "tune",
            "--plant",
            "out/plant.json",
            "--ff",
            "out/ff.json",
            "--N",
            "3",
            "--Nsub",
            "2",
            "--T",
            "2",
        ]),
    );
    ok(
        dir,
        &with(&[
            "--seed",
            "1",
            "baseline",
            "--plant",
            "out/plant.json",
            "--Nid",
            "auto",
            "--ff",
            "out/ff.json",
            "--iters",
            "200",
        ]),
    );
    ok(dir, &with(&["--seed", "2", "eval", "--plant", "out/plant.json", "--gain", "out/trace.json"]));
    ok(
        dir,
        &with(&[
            "--seed",
            "2",
            "eval",
            "--plant",
            "out/plant.json",
            "--gain",
            "out/baseline.json",
            "--mode",
            "zoh",
            "--out",
            "eval_zoh.json",
        ]),
    );
    ok(dir, &with(&["--seed", "5", "experiment"]));
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir.join("out"))
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn every_subcommand_is_byte_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = pipeline(a.path());
    let fb = pipeline(b.path());
    let names: Vec<&str> = fa.iter().map(|f| f.0.as_str()).collect();
    for expected in [
        "plant.json",
        "ff.json",
        "ff_auto.json",
        "trace.json",
        "baseline.json",
        "eval.json",
        "eval_zoh.json",
        "rows.csv",
        "traces.json",
    ] {
        assert!(names.contains(&expected), "missing {expected} in {names:?}");
    }
    let identical = fa == fb;
    println!(
        "criterion 11 (byte-identical artifacts over {} files): {}",
        fa.len(),
        if identical { "PASS" } else { "FAIL" }
    );
    assert!(identical);
}

#[test]
fn different_seeds_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--seed", "1", "gen-system", "--n", "4", "--out", "a.json"]);
    ok(dir.path(), &["--seed", "2", "gen-system", "--n", "4", "--out", "b.json"]);
    assert_ne!(fs::read(dir.path().join("a.json")).unwrap(), fs::read(dir.path().join("b.json")).unwrap());
}

#[test]
fn outputs_carry_the_documented_fields() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "4", "gen-system", "--n", "5"]);
    ok(d, &["--seed", "4", "feedforward", "--plant", "plant.json", "--tau-u", "15", "--kp-probe", "0.001"]);
    let ff: serde_json::Value = serde_json::from_slice(&fs::read(d.join("ff.json")).unwrap()).unwrap();
    for key in ["u_hat", "E", "tau_u", "min_sv_E", "diagnostics"] {
        assert!(ff.get(key).is_some(), "ff.json lacks {key}");
    }
    assert_eq!(ff["tau_u"], 15.0);
    let rows = {
        fs::write(d.join("tiny.json"), TINY_CONFIG).unwrap();
        ok(d, &["--config", "tiny.json", "--out-dir", "exp", "experiment", "--systems", "1", "--trials", "1"]);
        fs::read_to_string(d.join("exp/rows.csv")).unwrap()
    };
    let mut lines = rows.lines();
    assert_eq!(lines.next(), Some("system_id,trial_id,method,steady_state_rel_err,fbar,u0_err,wallclock_s,status"));
    assert_eq!(lines.count(), 2);
}

#[test]
fn probe_gain_can_be_read_from_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "4", "gen-system", "--n", "5"]);
    fs::write(d.join("kp.json"), "[[0.001, 0.0], [0.0, 0.001]]").unwrap();
    ok(
        d,
        &[
            "--seed",
            "4",
            "feedforward",
            "--plant",
            "plant.json",
            "--tau-u",
            "15",
            "--kp-probe",
            "kp.json",
            "--out",
            "a.json",
        ],
    );
    ok(
        d,
        &[
            "--seed",
            "4",
            "feedforward",
            "--plant",
            "plant.json",
            "--tau-u",
            "15",
            "--kp-probe",
            "0.001",
            "--out",
            "b.json",
        ],
    );
    assert_eq!(fs::read(d.join("a.json")).unwrap(), fs::read(d.join("b.json")).unwrap());
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(d, &["eval", "--plant", "missing.json", "--gain", "missing.json"]), 2);
    fs::write(d.join("bad.json"), r#"{"bogus": 1}"#).unwrap();
    assert_eq!(code(d, &["--config", "bad.json", "experiment"]), 2);
    fs::write(d.join("zero.json"), r#"{"trials": 0}"#).unwrap();
    assert_eq!(code(d, &["--config", "zero.json", "experiment"]), 2);
    assert_eq!(code(d, &["gen-system", "--n", "4", "--m", "1", "--p", "2"]), 2);
    assert_eq!(code(d, &["tune", "--no-such-flag"]), 2);
    ok(d, &["--seed", "4", "gen-system", "--n", "5"]);
    assert_eq!(code(d, &["feedforward", "--plant", "plant.json", "--tau-u", "soon"]), 2);
    assert_eq!(code(d, &["eval", "--plant", "plant.json", "--gain", "plant.json"]), 2);
    assert_eq!(code(d, &["tune", "--plant", "plant.json", "--omega", "5"]), 2);
}

#[test]
fn numerical_failures_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "4", "gen-system", "--n", "5"]);
    // A large negative probe gain destabilizes the proportional loop.
    assert_eq!(code(d, &["feedforward", "--plant", "plant.json", "--tau-u", "10", "--kp-probe=-1000"]), 3);
    // A first-order model cannot reach a two-dimensional setpoint.
    assert_eq!(code(d, &["baseline", "--plant", "plant.json", "--Nid", "20000", "--order", "1"]), 3);
    // Too few identification samples is a usage error.
    assert_eq!(code(d, &["baseline", "--plant", "plant.json", "--Nid", "100"]), 2);
}
