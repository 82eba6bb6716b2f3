//! Surface-level command tests: argument handling, file round trips and
//! exit codes. The heavier end-to-end flows live in the acceptance suite.

use std::process::Command;

fn aspd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aspd"))
}

#[test]
fn sample_fps_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.xyz");
    std::fs::write(
        &input,
        "0 0 0\n1 0 0\n0 1 0\n1 1 0\n0.5 0.5 1\n# trailing comment\n",
    )
    .unwrap();
    let output = dir.path().join("out.xyz");
    let status = aspd()
        .args([
            "sample",
            "--input",
            input.to_str().unwrap(),
            "--sampler",
            "fps",
            "--m",
            "3",
            "--out",
            output.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&output).unwrap();
    assert_eq!(text.lines().count(), 3);
    // FPS from index 0 keeps the input's first point verbatim.
    assert!(text.lines().next().unwrap().starts_with("0.0000000"));
}

#[test]
fn bench_runs() {
    let status = aspd()
        .args(["bench", "--op", "fps", "--n", "256", "--m", "32", "--repeat", "2"])
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let status = aspd()
        .args([
            "gen-data",
            "--out",
            dir.path().join("d").to_str().unwrap(),
            "--classes",
            "1",
            "--per-class",
            "4",
            "--points",
            "16",
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    let status = aspd()
        .args(["bench", "--op", "nope", "--n", "16"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn io_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let status = aspd()
        .args([
            "sample",
            "--input",
            dir.path().join("missing.xyz").to_str().unwrap(),
            "--sampler",
            "fps",
            "--m",
            "2",
            "--out",
            dir.path().join("out.xyz").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));

    // Malformed line -> parse error.
    let bad = dir.path().join("bad.xyz");
    std::fs::write(&bad, "1 2\n").unwrap();
    let status = aspd()
        .args([
            "sample",
            "--input",
            bad.to_str().unwrap(),
            "--sampler",
            "fps",
            "--m",
            "1",
            "--out",
            dir.path().join("out.xyz").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn numeric_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("nan.xyz");
    std::fs::write(&bad, "nan 0 0\n1 0 0\n").unwrap();
    let status = aspd()
        .args([
            "sample",
            "--input",
            bad.to_str().unwrap(),
            "--sampler",
            "fps",
            "--m",
            "1",
            "--out",
            dir.path().join("out.xyz").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(4));
}
