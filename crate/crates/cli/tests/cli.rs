use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn agdh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agdh"))
        .args(args)
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .expect("binary runs")
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares against a checked-in file; `UPDATE_GOLDEN=1` rewrites it instead.
fn check_golden(name: &str, actual: &str) {
    let path = golden(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(&path, actual).unwrap();
        return;
    }
    let expected = fs::read_to_string(&path).unwrap();
    assert!(expected == actual, "{name} differs from the golden file");
}

fn run_reference(args: &[&str], stem: &str) {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let mut full = args.to_vec();
    full.extend(["--out", out_dir]);
    let out = agdh(&full);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    check_golden(&format!("{stem}.stdout"), &String::from_utf8(out.stdout).unwrap());
    check_golden(
        &format!("{stem}.transcript"),
        &fs::read_to_string(dir.path().join("transcript.txt")).unwrap(),
    );
    let audit = fs::read_to_string(dir.path().join("audit.txt")).unwrap();
    assert!(audit.ends_with("result clean\n"));
    let metrics = fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
    assert!(metrics.contains("conserved true"));
}

#[test]
fn lossless_reference_run_matches_golden() {
    run_reference(
        &[
            "run",
            "--nodes",
            "10",
            "--loss",
            "0.0",
            "--seed",
            "42",
            "--duration",
            "120s",
        ],
        "run_n10_seed42",
    );
}

#[test]
fn merge_split_reference_run_matches_golden() {
    run_reference(
        &["run", "--scenario", "scenarios/merge_split.scn", "--seed", "7"],
        "merge_split_seed7",
    );
}

#[test]
fn lossless_run_reports_the_cost_row() {
    let out = agdh(&["run", "--nodes", "4", "--seed", "1", "--duration", "40s"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(
        text.contains("cost m=4 member_exps=2 leader_exps=4 messages=4 broadcasts=1 rounds=2 match"),
        "{text}"
    );
    assert!(text.contains("findings=0 clean"));
    assert!(text.ends_with("result ok\n"));
}

#[test]
fn configuration_errors_exit_with_two() {
    let cases: [&[&str]; 5] = [
        &["run", "--scenario", "does-not-exist.scn"],
        &["run", "--loss", "1.5"],
        &["run", "--duration", "ten"],
        &["run", "--toy", "--prod"],
        &["run", "--repeat", "0"],
    ];
    for args in cases {
        let out = agdh(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty(), "{args:?}");
    }
}

#[test]
fn scenario_syntax_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.scn");
    fs::write(&path, "10s join 11\n20s leave 3 sideways\n").unwrap();
    let out = agdh(&["run", "--scenario", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn failed_agreement_exits_with_one() {
    // Nobody can hear anybody.
    let out = agdh(&["run", "--nodes", "3", "--loss", "1.0", "--duration", "30s"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stdout).unwrap().contains("final no agreement"));
}

#[test]
fn repeat_fans_out_consecutive_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = agdh(&[
        "run",
        "--nodes",
        "3",
        "--toy",
        "--seed",
        "5",
        "--repeat",
        "3",
        "--duration",
        "40s",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let headers: Vec<&str> = text.lines().filter(|l| l.starts_with("== seed")).collect();
    assert_eq!(headers, ["== seed 5", "== seed 6", "== seed 7"]);
    assert!(text.contains("group=toy"));
    for seed in 5..8 {
        assert!(dir.path().join(format!("seed-{seed}/transcript.txt")).is_file());
    }
}

#[test]
fn eager_rekey_emits_jgroup() {
    let dir = tempfile::tempdir().unwrap();
    let scn = dir.path().join("join.scn");
    fs::write(&scn, "30s join 4\n").unwrap();
    let out = agdh(&[
        "run",
        "--nodes",
        "3",
        "--duration",
        "50s",
        "--eager-rekey",
        "--scenario",
        scn.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let transcript = fs::read_to_string(dir.path().join("transcript.txt")).unwrap();
    assert!(transcript.contains(" JGROUP to=bcast "));
}

#[test]
fn bench_reports_batched_and_unbatched_leaders() {
    let out = agdh(&["bench", "--members", "8", "--iterations", "5"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("blindings group=toy per_sec="));
    assert!(text.contains("blindings group=modp1024-160 per_sec="));
    assert!(text.contains("leader batched m=8 exps_after_last=1 exps_at_finalize=0 "));
    assert!(text.contains("leader unbatched m=8 exps_after_last=9 "));
}
