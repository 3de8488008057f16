//! End-to-end runs of the `chromaskew` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 5

[dataset]
image_size = 16
train_size = 80
test_size = 12

[model]
epochs = 1

[metrics]
probe_size = 6
heatmaps = 1

[compare]
samples = 12

[fl]
rounds = 2
root_size = 16
adversarial_ratio = 0.5

[attack]
hue = [-0.1, 0.1]
scale = [0.8]
contrast = [1.2]
brightness = [0.0]
"#;

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("chromaskew-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_chromaskew"));
    cmd.args(args).env_remove("CHROMASKEW_OUT");
    if let Some(dir) = env_out {
        cmd.env("CHROMASKEW_OUT", dir);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn csvs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn fl_runs_are_byte_identical() {
    let dir = scratch("repro");
    let cfg = write_config(&dir, SMALL);
    let (a, b) = (dir.join("a"), dir.join("b"));
    for out in [&a, &b] {
        let o = run(&["--config", &cfg, "--out", out.to_str().unwrap(), "fl"], None);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ca, cb) = (csvs(&a), csvs(&b));
    let names: Vec<&str> = ca.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["fl_poison.csv", "fl_rounds.csv", "fl_summary.csv"]);
    assert_eq!(ca, cb);
    assert_eq!(fs::read(a.join("fl_global.cdwt")).unwrap(), fs::read(b.join("fl_global.cdwt")).unwrap());
    let rounds = String::from_utf8(ca[1].1.clone()).unwrap();
    assert!(rounds.starts_with("round,adversarial_ratio,accuracy"));
    assert_eq!(rounds.lines().count(), 3);
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = scratch("seed");
    let cfg = write_config(&dir, SMALL);
    let (a, b) = (dir.join("a"), dir.join("b"));
    for (out, seed) in [(&a, "1"), (&b, "2")] {
        let o = run(&["--config", &cfg, "--seed", seed, "--out", out.to_str().unwrap(), "baseline"], None);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_ne!(csvs(&a), csvs(&b));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = scratch("env");
    let cfg = write_config(&dir, SMALL);
    let out = dir.join("from-env");
    let o = run(&["--config", &cfg, "gen-data"], Some(&out));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let labels = fs::read_to_string(out.join("train/labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 81);
    assert!(out.join("test/00000.ppm").exists());
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = scratch("config");
    let bad_key = write_config(&dir, "[fl]\nrouns = 3\n");
    assert_eq!(run(&["--config", &bad_key, "fl"], None).status.code(), Some(2));
    let bad_value = write_config(&dir, "[fl]\nadversarial_ratio = 1.5\n");
    assert_eq!(run(&["--config", &bad_value, "fl"], None).status.code(), Some(2));
    let missing = dir.join("missing.toml");
    assert_eq!(run(&["--config", missing.to_str().unwrap(), "fl"], None).status.code(), Some(2));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn missing_dataset_exits_with_3() {
    let dir = scratch("data");
    let cfg = write_config(
        &dir,
        &format!("[dataset]\nkind = \"cifar10\"\npath = \"{}\"\n", dir.join("nowhere").display()),
    );
    let o = run(&["--config", &cfg, "--out", dir.join("out").to_str().unwrap(), "baseline"], None);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn inspect_prints_both_heatmaps() {
    let dir = scratch("inspect");
    let cfg = write_config(&dir, SMALL);
    let o = run(&["--config", &cfg, "--out", dir.join("out").to_str().unwrap(), "inspect", "--sample", "3"], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("ssim"), "{text}");
    fs::remove_dir_all(&dir).unwrap();
}
