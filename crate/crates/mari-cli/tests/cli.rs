use std::path::Path;
use std::process::{Command, Output};

fn mari(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mari"))
        .args(args)
        .arg("--run-dir")
        .arg(dir)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_are_one_line() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["eval", "--rho", "lots"], &[]] {
        let o = mari(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        let err = stderr(&o);
        assert!(err.starts_with("USAGE_ERROR: "), "{err}");
        assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    }
}

#[test]
fn missing_run_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = mari(&dir.path().join("nowhere"), &["pretrain"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("MISSING_ARTIFACT"), "{}", stderr(&o));
}

#[test]
fn stages_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let ok = |args: &[&str]| {
        let o = mari(&run, args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        String::from_utf8(o.stdout).unwrap()
    };
    let counts: serde_json::Value =
        serde_json::from_str(&ok(&["gen-data", "--seed", "0"])).unwrap();
    assert!(counts.as_array().is_some_and(|a| !a.is_empty()));

    let o = mari(&run, &["eval"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("CALIBRATION_MISSING"));
    let o = mari(&run, &["report"]);
    assert_ne!(o.status.code(), Some(0));
    let o = mari(&run, &["calibrate", "--seed", "5"]);
    assert!(stderr(&o).starts_with("INVALID_INPUT"), "{}", stderr(&o));

    for stage in [
        "pretrain",
        "train-adapters",
        "train-probe",
        "calibrate",
        "eval",
        "diagnose",
    ] {
        serde_json::from_str::<serde_json::Value>(&ok(&[stage])).unwrap();
    }
    let report = ok(&["report"]);
    assert!(report.contains("multi-gated"), "{report}");

    // A config change drops the threshold until the next calibration.
    ok(&["calibrate", "--rho", "0.8"]);
    ok(&["eval"]);
    let o = mari(&run, &["eval", "--rho", "0.7"]);
    assert!(stderr(&o).starts_with("CALIBRATION_MISSING"));
}
