use std::path::Path;
use std::process::{Command, Output};

use clap::Parser;
use wmcloak::cli::{resolve_config, Cli};
use wmcloak::config::RunConfig;
use wmcloak::io::write_image;
use wmcloak_core::synth::natural_image;

fn wmcloak(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wmcloak")).args(args).output().unwrap()
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn image_dir(dir: &Path, n: u64, size: usize) {
    for i in 0..n {
        write_image(&natural_image(size, size, 50 + i), &dir.join(format!("img{i}.png"))).unwrap();
    }
}

fn golden(name: &str, actual: &serde_json::Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    let expected: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(actual, &expected, "{} drifted:\n{}", path.display(), serde_json::to_string_pretty(actual).unwrap());
}

#[test]
fn empty_config_gives_defaults() {
    for text in ["", "{}", "  \n"] {
        let cfg = RunConfig::from_json(text).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let t = cfg.train_config();
        assert_eq!(t.weights.alpha, 1.0);
        assert_eq!(t.weights.beta, 10.0);
        assert_eq!(t.budget.w, 4.0);
        assert_eq!(t.budget.c, 10.0 / 255.0);
        assert_eq!(t.batch_size, 8);
        assert_eq!(t.learning_rate, 0.001);
        assert_eq!(t.epochs, 200);
        assert_eq!(cfg.imitation.strength, 0.3);
        cfg.validate().unwrap();
    }
}

#[test]
fn flags_override_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.json");
    std::fs::write(&file, r#"{"train": {"weights": {"beta": 3.0}, "epochs": 7}}"#).unwrap();
    let f = file.to_str().unwrap();
    let cli = Cli::try_parse_from(["wmcloak", "train", "--config", f, "--out", "o", "--beta", "0"]).unwrap();
    let cfg = resolve_config(cli.verb.common()).unwrap();
    assert_eq!(cfg.train.weights.beta, 0.0);
    assert_eq!(cfg.train.epochs, 7);
    let cli = Cli::try_parse_from(["wmcloak", "train", "--config", f, "--out", "o"]).unwrap();
    assert_eq!(resolve_config(cli.verb.common()).unwrap().train.weights.beta, 3.0);
}

#[test]
fn unknown_keys_are_named() {
    let err = RunConfig::from_json(r#"{"betta": 0}"#).unwrap_err().to_string();
    assert!(err.contains("betta"), "{err}");
    let err = RunConfig::from_json(r#"{"train": {"weights": {"betta": 0}}}"#).unwrap_err().to_string();
    assert!(err.contains("betta"), "{err}");
    let err = RunConfig::from_json(r#"{"defense": {"jpeg_quality": 0}}"#).and_then(|c| c.validate()).unwrap_err();
    assert!(err.to_string().contains("jpeg_quality"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.json");
    std::fs::write(&file, r#"{"betta": 1}"#).unwrap();
    let out = wmcloak(&["render-watermark", "--text", "A", "--size", "32", "--config", file.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("betta"));
}

#[test]
fn render_watermark_json_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let res = stdout_json(&wmcloak(&["render-watermark", "--text", "VAN_GOGH", "--size", "512", "--out", out.to_str().unwrap(), "--json"]));
    golden("render_watermark.json", &res);
    assert!(out.join("VAN_GOGH.png").is_file());
    let resolved: RunConfig = serde_json::from_str(&std::fs::read_to_string(out.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(resolved.image_size, Some((512, 512)));
    let m = wmcloak::io::read_image_native(&out.join("VAN_GOGH.png")).unwrap();
    assert!(m.data.iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn evaluate_identical_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = dir.path().join("imgs");
    image_dir(&imgs, 5, 64);
    let i = imgs.to_str().unwrap();
    let out = dir.path().join("eval");
    let res = stdout_json(&wmcloak(&["evaluate", "--reference", i, "--candidate", i, "--watermark", "ART", "--out", out.to_str().unwrap(), "--json"]));
    let agg = &res["summary"]["report"]["aggregates"];
    assert_eq!(agg["psnr"], "identical");
    assert_eq!(agg["ncc"], 0.0);
    assert!(agg["fid"].as_f64().unwrap().abs() < 1e-6);
    assert_eq!(agg["precision"], 1.0);
    golden("evaluate_identical.json", &res);
}

#[test]
fn cloak_needs_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = dir.path().join("imgs");
    image_dir(&imgs, 1, 32);
    let missing = dir.path().join("nowhere");
    let out = wmcloak(&["cloak", "--checkpoint", missing.to_str().unwrap(), "--input", imgs.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

fn train_tiny(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    image_dir(&data.join("painter"), 4, 32);
    std::fs::write(dir.join("map.json"), r#"{"painter": "ART"}"#).unwrap();
    let out = dir.join("train");
    let res = stdout_json(&wmcloak(&[
        "train", "--data", data.to_str().unwrap(), "--mapping", dir.join("map.json").to_str().unwrap(),
        "--out", out.to_str().unwrap(), "--image-size", "32", "--epochs", "2", "--batch-size", "2",
        "--generator-width", "4", "--discriminator-width", "4", "--split-per-class", "3", "--json",
    ]));
    assert_eq!(res["epochs"], 2);
    assert_eq!(res["train_images"], 3);
    assert_eq!(res["eval_images"], 1);
    assert_eq!(std::fs::read_to_string(out.join("train_log.jsonl")).unwrap().lines().count(), 2);
    out
}

#[test]
fn verbs_are_deterministic_and_batch_failures_are_collected() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_tiny(dir.path());
    let cp = a.join("checkpoint");
    let input = dir.path().join("to_cloak");
    image_dir(&input, 5, 40);
    std::fs::write(input.join("corrupt.png"), b"\x89PNG broken").unwrap();

    let cloak = |out: &Path| stdout_json(&wmcloak(&["cloak", "--checkpoint", cp.to_str().unwrap(), "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap(), "--json"]));
    let r1 = cloak(&dir.path().join("c1"));
    let r2 = cloak(&dir.path().join("c2"));
    assert_eq!(r1, r2);
    let s = &r1["summary"];
    assert_eq!(s["entries"].as_array().unwrap().len(), 5);
    assert_eq!(s["failures"][0]["file"], "corrupt.png");
    let mean: f64 = s["entries"].as_array().unwrap().iter().map(|e| e["psnr"]["db"].as_f64().unwrap()).sum::<f64>() / 5.0;
    assert!((s["aggregate_psnr"]["db"].as_f64().unwrap() - mean).abs() < 1e-9);
    for i in 0..5 {
        let f = format!("images/img{i}.png");
        let b1 = std::fs::read(dir.path().join("c1").join(&f)).unwrap();
        assert_eq!(b1, std::fs::read(dir.path().join("c2").join(&f)).unwrap());
    }

    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let r = stdout_json(&wmcloak(&["cloak", "--checkpoint", cp.to_str().unwrap(), "--input", empty.to_str().unwrap(), "--out", dir.path().join("c3").to_str().unwrap(), "--json"]));
    assert_eq!(r["summary"]["entries"].as_array().unwrap().len(), 0);
    assert!(r["summary"]["aggregate_psnr"].is_null());

    // retraining reproduces the checkpoint byte for byte
    let again = dir.path().join("again");
    std::fs::create_dir_all(&again).unwrap();
    let b = train_tiny(&again);
    for f in ["checkpoint/manifest.json", "checkpoint/generator.bin", "checkpoint/discriminator.bin", "train_log.jsonl"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }

    for verb in [&["defend", "--defense", "rs"][..], &["defend", "--defense", "jpeg"], &["simulate"]] {
        let run = |out: &str| {
            let out = dir.path().join(out);
            let mut args = verb.to_vec();
            args.extend(["--input", input.to_str().unwrap(), "--out", out.to_str().unwrap(), "--json"]);
            (stdout_json(&wmcloak(&args)), out)
        };
        let ((r1, o1), (r2, o2)) = (run("v1"), run("v2"));
        assert_eq!(r1, r2);
        assert_eq!(r1["summary"]["failures"].as_array().unwrap().len(), 1);
        for i in 0..5 {
            let f = format!("images/img{i}.png");
            assert_eq!(std::fs::read(o1.join(&f)).unwrap(), std::fs::read(o2.join(&f)).unwrap(), "{verb:?}");
        }
        std::fs::remove_dir_all(o1).unwrap();
        std::fs::remove_dir_all(o2).unwrap();
    }
}
