use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 5

[channel]
test_points = 20

[fingerprint]
schemes = ["AOA", "AMP+TOF"]
grid = 6

[fingerprint.search]
trials = 4
folds = 3
"#;

fn mimoloc(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mimoloc"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn unknown_config_key_exits_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bogus = 1\n");
    let o = mimoloc(&["run"], &cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error: config"), "{err}");
    assert!(err.contains("bogus"), "{err}");
}

#[test]
fn invalid_value_exits_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[fingerprint]\ngrid = 1\n");
    let o = mimoloc(&["generate"], &cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn stage_without_inputs_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let o = mimoloc(&["evaluate"], &cfg, &tmp.path().join("empty"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn stages_reproduce_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let whole = tmp.path().join("run");
    let staged = tmp.path().join("staged");
    let o = mimoloc(&["run"], &cfg, &whole);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let printed = String::from_utf8(o.stdout).unwrap();
    assert!(printed.starts_with("method,scheme,grid,count,mae_cm"));
    for stage in ["generate", "calibrate", "extract", "train", "evaluate"] {
        let o = mimoloc(&[stage], &cfg, &staged);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let mut compared = 0;
    for entry in std::fs::read_dir(&whole).unwrap() {
        let name = entry.unwrap().file_name();
        let name = name.to_string_lossy();
        if name == "manifest.json" || name == "config.toml" {
            continue;
        }
        let a = std::fs::read(whole.join(&*name)).unwrap();
        let b = std::fs::read(staged.join(&*name)).unwrap_or_else(|_| panic!("staged run lacks {name}"));
        assert!(a == b, "{name} differs");
        compared += 1;
    }
    assert!(compared >= 12, "{compared}");

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(whole.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert!(manifest["failure"].is_null());
    let errors = std::fs::read_to_string(whole.join("errors.csv")).unwrap();
    assert_eq!(errors.lines().count(), 1 + 2 + 3);
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(mimoloc(&["generate"], &cfg, &a).status.success());
    assert!(mimoloc(&["generate", "--seed", "6"], &cfg, &b).status.success());
    assert_ne!(std::fs::read(a.join("test.csi")).unwrap(), std::fs::read(b.join("test.csi")).unwrap());
}

#[test]
fn sweep_writes_one_directory_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("sweep");
    let o = mimoloc(&["sweep", "--axis", "snr", "--values", "10,30"], &cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for dir in ["snr_10", "snr_30"] {
        assert!(out.join(dir).join("errors.csv").exists(), "{dir}");
    }
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().count() > 2);
}
