use std::collections::BTreeMap;
use std::path::Path;

use wmcloak::dataset::{build_dataset, read_mapping, Split};
use wmcloak::io::write_image;
use wmcloak::Error;
use wmcloak_core::synth::natural_image;
use wmcloak_core::RenderParams;

fn make_class(root: &Path, class: &str, n: usize) {
    for i in 0..n {
        write_image(&natural_image(16, 16, i as u64), &root.join(class).join(format!("{i:02}.png"))).unwrap();
    }
}

fn mapping(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
}

#[test]
fn split_counts() {
    let dir = tempfile::tempdir().unwrap();
    make_class(dir.path(), "a", 12);
    make_class(dir.path(), "b", 12);
    let map = mapping(&[("a", "AAA"), ("b", "BBB")]);
    let idx = build_dataset(dir.path(), &map, 10, (64, 64), RenderParams::default()).unwrap();
    assert_eq!(idx.split(Split::Train).count(), 20);
    assert_eq!(idx.split(Split::Eval).count(), 4);
    // first ten of each class, in path order, train
    let eval: Vec<_> = idx.split(Split::Eval).map(|e| e.path.file_name().unwrap().to_owned()).collect();
    assert_eq!(eval, ["10.png", "11.png", "10.png", "11.png"]);
    for e in &idx.entries {
        assert!(idx.watermarks.contains_key(&e.watermark_id));
    }

    let idx = build_dataset(dir.path(), &map, 0, (64, 64), RenderParams::default()).unwrap();
    assert_eq!(idx.split(Split::Train).count(), 0);
    assert_eq!(idx.split(Split::Eval).count(), 24);
    let loaded = idx.load(Split::Eval, (16, 16)).unwrap();
    assert_eq!(loaded.len(), 24);
    assert_eq!(loaded[0].1, 0);
    assert_eq!(loaded[23].1, 1);
}

#[test]
fn mapping_text_becomes_watermark() {
    let dir = tempfile::tempdir().unwrap();
    make_class(dir.path(), "goldfish", 2);
    let map_path = dir.path().join("mapping.json");
    std::fs::write(&map_path, r#"{"goldfish": "IMAGENET_FISH"}"#).unwrap();
    let map = read_mapping(&map_path).unwrap();
    let data_root = dir.path();
    let idx = build_dataset(data_root, &map, 1, (128, 256), RenderParams::default()).unwrap();
    assert_eq!(idx.entries[0].watermark_id, "IMAGENET_FISH");
    let m = &idx.watermarks["IMAGENET_FISH"];
    assert_eq!(m.text, "IMAGENET_FISH");
    assert_eq!(m.dims(), (128, 256));
}

#[test]
fn ingestion_errors_name_the_class() {
    let dir = tempfile::tempdir().unwrap();
    make_class(dir.path(), "a", 2);
    std::fs::create_dir_all(dir.path().join("empty_one")).unwrap();
    let err = build_dataset(dir.path(), &mapping(&[("a", "A"), ("empty_one", "E")]), 1, (32, 32), RenderParams::default())
        .unwrap_err();
    assert!(matches!(&err, Error::Ingestion(msg) if msg.contains("empty_one")), "{err}");

    let err = build_dataset(dir.path(), &mapping(&[("a", "A")]), 1, (32, 32), RenderParams::default()).unwrap_err();
    assert!(err.to_string().contains("empty_one"), "{err}");
}
