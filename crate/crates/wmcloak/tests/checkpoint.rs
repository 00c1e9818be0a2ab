use std::path::Path;

use wmcloak::checkpoint::{config_digest, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, MANIFEST};
use wmcloak::pipeline::{train_model, train_with_log};
use wmcloak::Error;
use wmcloak_core::synth::natural_image;
use wmcloak_core::{render_watermark, ArchConfig, Image, RenderParams, ToyEncoder, TrainConfig};

fn config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: 2,
        seed: 5,
        image_size: (32, 32),
        arch: ArchConfig { generator_width: 4, discriminator_width: 4 },
        ..TrainConfig::default()
    }
}

fn data() -> Vec<(Image, usize)> {
    (0..6).map(|i| (natural_image(32, 32, i), (i % 2) as usize)).collect()
}

fn trained() -> Checkpoint {
    let marks = vec![
        render_watermark("AB", 32, 32, RenderParams::default()).unwrap(),
        render_watermark("CD", 32, 32, RenderParams::default()).unwrap(),
    ];
    train_model(&config(), marks, &data(), &ToyEncoder::new(0), None, None).unwrap()
}

fn bits(cp: &Checkpoint) -> Vec<u64> {
    cp.generator.params.tensors.iter().chain(&cp.discriminator.params.tensors).flat_map(|t| t.data.iter().map(|v| v.to_bits())).collect()
}

#[test]
fn round_trip_is_bit_identical() {
    let cp = trained();
    assert_eq!(cp.epoch, 2);
    assert_eq!(cp.loss_history.len(), 2);
    assert_eq!(cp.config_digest, config_digest(&cp.config));
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&cp, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(bits(&back), bits(&cp));
    assert_eq!(back.epoch, cp.epoch);
    assert_eq!(back.config, cp.config);
    assert_eq!(back.config_digest, cp.config_digest);
    assert_eq!(back.loss_history, cp.loss_history);
    assert_eq!(back.watermarks, cp.watermarks);
    assert_eq!(back.encoder_seed, 0);
    assert_eq!(back.watermark_ids(), ["AB", "CD"]);

    let manifest = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
    assert!(manifest.contains("\"algorithm\": \"adam\""));
    assert!(manifest.contains("\"beta2\": 0.999"));
}

fn tamper(dir: &Path, file: &str, f: impl FnOnce(Vec<u8>) -> Vec<u8>) {
    let p = dir.join(file);
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, f(bytes)).unwrap();
}

#[test]
fn tampering_is_detected() {
    let cp = trained();
    let dir = tempfile::tempdir().unwrap();

    save_checkpoint(&cp, dir.path()).unwrap();
    tamper(dir.path(), MANIFEST, |b| String::from_utf8(b).unwrap().replacen("\"epoch\": 2", "\"epoch\": 3", 1).into_bytes());
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Integrity { .. })));

    save_checkpoint(&cp, dir.path()).unwrap();
    tamper(dir.path(), "generator.bin", |mut b| {
        b[17] ^= 1;
        b
    });
    let err = load_checkpoint(dir.path()).unwrap_err();
    assert!(matches!(&err, Error::Integrity { msg, .. } if msg.contains("weights")), "{err}");

    save_checkpoint(&cp, dir.path()).unwrap();
    tamper(dir.path(), MANIFEST, |b| String::from_utf8(b).unwrap().replacen("\"learning_rate\": 0.001", "\"learning_rate\": 0.002", 1).into_bytes());
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Integrity { .. })));
}

#[test]
fn wrong_image_size_is_a_shape_error() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&trained(), dir.path()).unwrap();
    assert!(load_checkpoint_for(dir.path(), (32, 32)).is_ok());
    let err = load_checkpoint_for(dir.path(), (64, 64)).unwrap_err();
    assert!(matches!(err, Error::Core(wmcloak_core::Error::Shape(_))), "{err}");
}

#[test]
fn training_is_deterministic_and_logged() {
    let dir = tempfile::tempdir().unwrap();
    let marks = vec![render_watermark("AB", 32, 32, RenderParams::default()).unwrap()];
    let data: Vec<_> = data().into_iter().map(|(x, _)| (x, 0)).collect();
    let enc = ToyEncoder::new(0);
    let cache = dir.path().join("cache");
    let a = train_with_log(&config(), marks.clone(), &data, &enc, Some(&cache), &dir.path().join("a.jsonl")).unwrap();
    let b = train_with_log(&config(), marks, &data, &enc, Some(&cache), &dir.path().join("b.jsonl")).unwrap();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(std::fs::read_dir(&cache).unwrap().count(), 1);

    let log = std::fs::read_to_string(dir.path().join("a.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["epoch"], 2);
    assert_eq!(log, std::fs::read_to_string(dir.path().join("b.jsonl")).unwrap());

    let sa = tempfile::tempdir().unwrap();
    let sb = tempfile::tempdir().unwrap();
    save_checkpoint(&a, sa.path()).unwrap();
    save_checkpoint(&b, sb.path()).unwrap();
    for f in ["manifest.json", "generator.bin", "discriminator.bin"] {
        assert_eq!(std::fs::read(sa.path().join(f)).unwrap(), std::fs::read(sb.path().join(f)).unwrap(), "{f}");
    }
}
