use std::path::Path;
use std::process::{Command, Output};

fn ltvrec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltvrec"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL: [&str; 10] = [
    "--input",
    "log.csv",
    "--min-interactions",
    "1",
    "--folds",
    "0",
    "--k",
    "2",
    "--resamples",
    "20",
];

#[test]
fn simulate_then_staged_run_matches_run_all() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ltvrec(d, &["simulate", "--world", "tabular", "--users", "400", "--seed", "3", "--out", "log.csv"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("log.truth.json").exists());

    let staged = [
        vec!["ingest"],
        vec!["factorize"],
        vec!["build-states"],
        vec!["fit-behavior"],
        vec!["evaluate", "--kind", "onpolicy"],
        vec!["evaluate", "--kind", "q"],
        vec!["improve"],
        vec!["evaluate", "--kind", "offpolicy"],
        vec!["compare", "--policies", "target,myopic"],
        vec!["report", "--out", "copy"],
    ];
    for cmd in staged {
        let mut args = cmd.clone();
        args.extend(SMALL);
        args.extend(["--workdir", "staged"]);
        let out = ltvrec(d, &args);
        assert_eq!(code(&out), 0, "{cmd:?}: {}", String::from_utf8_lossy(&out.stderr));
    }

    let mut args = vec!["run-all", "--workdir", "whole"];
    args.extend(SMALL);
    let out = ltvrec(d, &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("target"));

    for file in ["report.txt", "report.json", "gamma_sweep.csv"] {
        let a = std::fs::read(d.join("staged/report").join(file)).unwrap();
        let b = std::fs::read(d.join("whole/report").join(file)).unwrap();
        let c = std::fs::read(d.join("copy").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
        assert_eq!(a, c, "{file}");
    }
}

#[test]
fn stage_without_upstream_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("log.csv"), "u,i,1,0\n").unwrap();
    let out = ltvrec(dir.path(), &["evaluate", "--kind", "q", "--input", "log.csv"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing record"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&ltvrec(dir.path(), &["no-such-command"])), 1);
    assert_eq!(code(&ltvrec(dir.path(), &["run-all", "--beta", "2"])), 1);
    assert_eq!(code(&ltvrec(dir.path(), &["run-all", "--input", "absent.csv"])), 2);
    assert_eq!(code(&ltvrec(dir.path(), &["--help"])), 0);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.conf"), "# settings\nk = 7\nlambda = 0.5\n").unwrap();
    let out = ltvrec(dir.path(), &["show-config", "--config", "run.conf", "--k", "9"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.lines().any(|l| l.replace(' ', "") == "k=9"), "{text}");
    assert!(text.lines().any(|l| l.replace(' ', "") == "lambda=0.5"), "{text}");
}
