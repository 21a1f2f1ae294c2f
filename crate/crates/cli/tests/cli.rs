use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn qpi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qpi"))
        .args(args)
        .env_remove("QPI_THREADS")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

#[test]
fn coherence_table() {
    let o = qpi(&["coherence", "--wavelength-nm", "632", "--na", "0.4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let row = text.lines().nth(1).unwrap();
    let cols: Vec<f64> = row.split_whitespace().map(|c| c.parse().unwrap()).collect();
    assert_eq!(cols[0], 632.0);
    assert!((cols[1] - 7.57).abs() < 0.01, "{row}");
    assert!((cols[2] - 0.9638).abs() < 1e-4, "{row}");

    let o = qpi(&["coherence", "--na", "1.5"]);
    assert!(!o.status.success());
}

#[test]
fn check_config_lists_violations() {
    let o = qpi(&["check-config"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).trim(), "ok");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[synth]\nfov = [32, 32]\n[train]\nbatch_size = 0\n").unwrap();
    let o = qpi(&["check-config", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    let text = stdout(&o);
    assert!(text.contains("synth.fov"), "{text}");
    assert!(text.contains("train"), "{text}");

    std::fs::write(&bad, "[synth]\nfovs = 3\n").unwrap();
    let o = qpi(&["check-config", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("fovs"), "{}", stderr(&o));
}

#[test]
fn stage_by_stage_then_verify_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let config = smoke_config();
    let config = config.to_str().unwrap();

    let o = qpi(&["synth", "--config", config, "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    // Later stages pick up the configuration saved by the first one.
    for args in [
        vec!["retrieve"],
        vec!["extract"],
        vec!["dataset", "build"],
        vec!["--deterministic", "train"],
        vec!["predict"],
    ] {
        let mut a = args.clone();
        a.extend(["--out", out]);
        let o = qpi(&a);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    let o = qpi(&["eval", "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = stdout(&o);
    assert!(report.contains("[hvi]") && report.contains("[evl]"), "{report}");
    assert!(report.contains("mcc"), "{report}");

    let o = qpi(&["--deterministic", "verify", "--out", out, "--stage", "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("reproduced"));

    let o = qpi(&["verify", "--out", out, "--stage", "bogus"]);
    assert!(!o.status.success());

    let svg = dir.path().join("hvi.svg");
    let roc = dir.path().join("reports/hvi.roc.csv");
    let o = qpi(&["plot-roc", roc.to_str().unwrap(), "--out", svg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg") || text.starts_with("<?xml"), "{}", &text[..40.min(text.len())]);
    assert!(text.contains("healthy"), "title should name the task");

    let scores = dir.path().join("predictions/evl.scores.csv");
    let o = qpi(&["score", scores.to_str().unwrap(), "--threshold", "0.5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("sensitivity"));
}

#[test]
fn stage_failure_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let o = qpi(&["train", "--config", smoke_config().to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("train"), "{}", stderr(&o));
}

#[test]
fn bad_thread_count_is_rejected() {
    let o = Command::new(env!("CARGO_BIN_EXE_qpi"))
        .args(["check-config"])
        .env("QPI_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("QPI_THREADS"));
}
