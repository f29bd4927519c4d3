use std::fs;
use std::process::{Command, Output};

fn revnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_revnet")).args(args).output().expect("run revnet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn paramcount_checks_known_presets() {
    let o = revnet(&["paramcount", "--set", "arch=resnet-32"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("params=464154"), "{s}");
    assert!(s.contains("preset=resnet-32"));
    assert!(s.contains("status=pass"));
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.cfg");
    fs::write(&cfg, "total_steps = 3\nbatch_size = 8\nsynthetic_samples = 32\n").unwrap();
    let out = dir.path().join("run");
    let o = revnet(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--engine",
        "stored",
        "--precision",
        "f32",
        "--seed",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("steps=3"));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(out.join("checkpoint-final.bin").exists());
}

#[test]
fn memprofile_and_gradcheck_pass() {
    let dir = tempfile::tempdir().unwrap();
    let o = revnet(&["memprofile", "--set", "batch_size=4", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(fs::read_to_string(dir.path().join("memprofile.csv")).unwrap().starts_with("depth,"));

    let o = revnet(&["gradcheck", "--set", "units=1-1"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("check=max_rel_err"));
}

#[test]
fn errors_exit_with_two() {
    let o = revnet(&["train", "--set", "colour=red"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
    let o = revnet(&["train", "--set", "no-equals-sign"]);
    assert_eq!(o.status.code(), Some(2));
    let o = revnet(&["train", "--config", "/definitely/not/here.cfg"]);
    assert_eq!(o.status.code(), Some(2));
}
