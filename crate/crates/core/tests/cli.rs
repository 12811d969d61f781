mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn growcl(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_growcl"))
        .args(args)
        .env("GROWCL_OUT", out_root)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn run_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), common::TINY);
    let out = tmp.path().join("out");
    let mut dirs = Vec::new();
    for mode in ["grown", "grow_only", "scratch"] {
        let o = growcl(
            &["run", "--config", cfg.to_str().unwrap(), "--mode", mode],
            &out,
        );
        assert_eq!(code(&o), 0, "{mode}: {}", stderr(&o));
        let dir = PathBuf::from(stdout(&o).trim());
        assert!(dir.starts_with(&out), "{dir:?} not under GROWCL_OUT");
        assert!(dir.join("manifest.json").is_file());
        assert!(dir.join("size.csv").is_file());
        dirs.push(dir);
    }

    let mut args = vec!["report"];
    args.extend(dirs.iter().map(|d| d.to_str().unwrap()));
    let o = growcl(&args, &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = stdout(&o);
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("method,1,2,3,Avg,Model Size"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4, "{table}");
    for (row, method) in rows.iter().zip(["grown", "grow_only", "scratch"]) {
        let c: Vec<&str> = row.split(',').collect();
        assert_eq!(c[0], method);
        let acc: Vec<f64> = c[1..4].iter().map(|v| v.parse().unwrap()).collect();
        let avg: f64 = c[4].parse().unwrap();
        assert!((avg - acc.iter().sum::<f64>() / 3.0).abs() <= 1e-9);
        assert!(c[5].ends_with('x'));
    }
    assert!(rows[2].ends_with(",3x"));
    assert!(rows[3].starts_with("delta:grown-grow_only:seed=0,"));
}

#[test]
fn config_errors_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"lamda": 0.1}"#);
    let o = growcl(
        &["run", "--config", cfg.to_str().unwrap(), "--mode", "grown"],
        tmp.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lamda"), "{}", stderr(&o));

    let missing = tmp.path().join("nope.json");
    let o = growcl(
        &[
            "run",
            "--config",
            missing.to_str().unwrap(),
            "--mode",
            "grown",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 2);

    let o = growcl(
        &["run", "--config", cfg.to_str().unwrap(), "--mode", "fancy"],
        tmp.path(),
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn report_needs_run_directories() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&growcl(&["report"], tmp.path())), 2);
    let o = growcl(&["report", tmp.path().to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("manifest.json"), "{}", stderr(&o));
}

#[test]
fn verify_small_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("sweep.csv");
    let o = growcl(
        &[
            "verify",
            "--instances",
            "12",
            "--seed",
            "3",
            "--grad-points",
            "4",
            "--csv",
            csv.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("prop1: 12 instances, 0 failures"), "{text}");
    assert!(text.lines().filter(|l| l.starts_with("grad ")).count() >= 6);
    let rows = std::fs::read_to_string(&csv).unwrap();
    assert!(rows.starts_with("instance_id,min_free,min_constrained,pass\n"));
    assert_eq!(rows.lines().count(), 13);
}

#[test]
fn verify_rejects_zero_instances() {
    let tmp = tempfile::tempdir().unwrap();
    let o = growcl(&["verify", "--instances", "0"], tmp.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn planted_fault_makes_verify_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let o = growcl(
        &[
            "verify",
            "--instances",
            "60",
            "--grad-points",
            "2",
            "--plant-fault",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 1, "{}", stdout(&o));
    assert!(stdout(&o).contains("suspicious"), "{}", stdout(&o));
}
