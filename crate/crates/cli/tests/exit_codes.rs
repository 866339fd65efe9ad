use std::fs;
use std::process::Command;

fn icenet(dir: &std::path::Path, args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_icenet"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "no_such_key = 1\n").unwrap();
    assert_eq!(icenet(dir.path(), &["table1", "--config", "bad.cfg"]), 2);
    assert_eq!(icenet(dir.path(), &["table1", "--config", "missing.cfg"]), 2);
    assert_eq!(icenet(dir.path(), &["table1", "--snr-db", "40"]), 2);
    assert_eq!(icenet(dir.path(), &["table1"]), 2, "checkpoint is required");
    assert_eq!(icenet(dir.path(), &["train", "--model", "rnn"]), 2);
}

#[test]
fn missing_artifacts_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(icenet(dir.path(), &["train", "--out-dir", "empty"]), 3);
    assert_eq!(icenet(dir.path(), &["iter-hist", "--checkpoint", "nope.iebp"]), 3);
}

#[test]
fn corrupt_checkpoint_is_not_a_success() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("junk.iebp"), b"IEBPjunk").unwrap();
    let code = icenet(dir.path(), &["table1", "--checkpoint", "junk.iebp"]);
    assert_ne!(code, 0);
    assert_ne!(code, 3);
}
