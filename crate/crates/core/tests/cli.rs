//! End-to-end runs of the `sifcn` binary on a tiny synthetic experiment.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "network.backbone_channels=[4,4,8,8]",
    "--set",
    "network.fusion_channels=[4,4,4]",
    "--set",
    "train.checkpoint_every=2",
    "--set",
    "data.train_count=4",
    "--set",
    "data.test_count=2",
];

fn sifcn<S: AsRef<str>>(dir: &Path, args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sifcn"))
        .args(args.iter().map(AsRef::as_ref))
        .args(["--output-dir", dir.to_str().unwrap()])
        .env_remove("SIFCN_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "status {:?}\nstderr: {}", out.status, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn with<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    TINY.iter().chain(extra).copied().collect()
}

#[test]
fn train_infer_eval_plot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let stdout = ok(&sifcn(d, &with(&["train", "--max-iters", "4"])));
    assert!(stdout.contains("trained iterations 0..4"), "{stdout}");
    for f in ["metrics.csv", "latest.ckpt", "config.resolved.toml", "checkpoints/iter-000002.ckpt", "checkpoints/iter-000004.ckpt"] {
        assert!(d.join(f).is_file(), "{f} missing");
    }
    let metrics = std::fs::read_to_string(d.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5, "header and one row per iteration");

    let stdout = ok(&sifcn(d, &with(&["infer", "--score-threshold", "0.3"])));
    assert!(stdout.contains("2 images") && stdout.contains("images/s"), "{stdout}");
    assert!(d.join("detections.txt").is_file());

    let stdout = ok(&sifcn(d, &with(&["eval"])));
    assert!(stdout.contains("AP") && stdout.contains("AR"), "{stdout}");
    for f in ["report.json", "summary.csv", "pr.svg", "fppi.svg"] {
        assert!(d.join("eval").join(f).is_file(), "{f} missing");
    }

    let stdout = ok(&sifcn(d, &with(&["plot", d.join("metrics.csv").to_str().unwrap()])));
    assert!(stdout.contains("loss.svg"), "{stdout}");
    let svg = std::fs::read_to_string(d.join("plots/loss.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let full = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    ok(&sifcn(full.path(), &with(&["train", "--max-iters", "4"])));
    ok(&sifcn(split.path(), &with(&["train", "--max-iters", "2"])));
    let stdout = ok(&sifcn(split.path(), &with(&["train", "--max-iters", "4", "--resume-latest"])));
    assert!(stdout.contains("trained iterations 2..4"), "{stdout}");
    for f in ["metrics.csv", "latest.ckpt"] {
        assert_eq!(std::fs::read(full.path().join(f)).unwrap(), std::fs::read(split.path().join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn gen_data_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("test-set");
    let stdout = ok(&sifcn(dir.path(), &["gen-data", "--split", "test", "--count", "3", "--out", data.to_str().unwrap()]));
    assert!(stdout.contains("wrote 3 samples"), "{stdout}");
    let pngs = std::fs::read_dir(data.join("images")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert_eq!(pngs, 3);
    let samples = sifcn::maps::load_dataset(&data).unwrap();
    assert_eq!(samples.len(), 3);
}

#[test]
fn show_config_applies_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&sifcn(dir.path(), &["--seed", "9", "--set", "train.lr0=0.005", "show-config"]));
    let cfg: toml::Table = stdout.parse().unwrap();
    assert_eq!(cfg["train"]["seed"].as_integer(), Some(9));
    assert_eq!(cfg["train"]["lr0"].as_float(), Some(0.005));
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let code = |args: &[&str]| sifcn(d, args).status.code();
    assert_eq!(code(&["no-such-command"]), Some(2));
    assert_eq!(code(&["--set", "train.lr0=-1", "show-config"]), Some(3));
    assert_eq!(code(&["--set", "nonsense", "show-config"]), Some(3));
    assert_eq!(code(&["--config", "/nonexistent/cfg.toml", "show-config"]), Some(4));
    let out = sifcn(d, &["infer", "--checkpoint", "/nonexistent/model.ckpt"]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    assert_eq!(code(&["eval", "--detections", "/nonexistent/dets.txt"]), Some(4));
}
