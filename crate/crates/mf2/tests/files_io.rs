use std::collections::BTreeMap;
use std::fs;

use mf2::files::{load_manifest, read_png, save_manifest, write_fixture};
use mf2::Error;
use mf2_core::data::fixture::render_image;
use mf2_core::data::{AuId, Emotion};

#[test]
fn empty_file_is_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    fs::write(&path, "").unwrap();
    let f = load_manifest(&path).unwrap();
    assert!(f.manifest.is_empty());
    assert!(f.manifest.class_counts().values().all(|&n| n == 0));
}

#[test]
fn counts_match_a_hand_tally() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 2, 8, 5, 32).unwrap();
    let f = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(f.manifest.len(), 16);
    assert_eq!(f.manifest.video_ids().len(), 2);
    let mut classes: BTreeMap<Emotion, usize> = BTreeMap::new();
    let mut aus: BTreeMap<AuId, usize> = BTreeMap::new();
    for line in fs::read_to_string(dir.path().join("manifest.jsonl"))
        .unwrap()
        .lines()
    {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let e: Emotion = serde_json::from_value(v["emotion"].clone()).unwrap();
        *classes.entry(e).or_default() += 1;
        for (i, bit) in v["au_labels"].as_array().unwrap().iter().enumerate() {
            if bit.as_u64() == Some(1) {
                *aus.entry(AuId::from_index(i).unwrap()).or_default() += 1;
            }
        }
    }
    for (e, n) in f.manifest.class_counts() {
        assert_eq!(classes.get(e).copied().unwrap_or(0), *n, "{e}");
    }
    for (a, n) in f.manifest.au_counts() {
        assert_eq!(aus.get(a).copied().unwrap_or(0), *n, "{a}");
    }
}

fn one_record(emotion: &str) -> String {
    let landmarks: Vec<[f64; 2]> = (0..68).map(|i| [i as f64 * 0.4, 10.0]).collect();
    serde_json::json!({
        "sample_id": "a",
        "video_id": "v",
        "frame_index": 0,
        "image_path": "a.png",
        "landmarks": landmarks,
        "au_labels": vec![0; 12],
        "emotion": emotion,
    })
    .to_string()
}

#[test]
fn unknown_emotion_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    fs::write(
        &path,
        format!("{}\n{}\n", one_record("Anger"), one_record("Joy")),
    )
    .unwrap();
    match load_manifest(&path) {
        Err(Error::UnknownLabel { line, label, .. }) => {
            assert_eq!(line, 2);
            assert_eq!(label, "Joy");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn malformed_and_duplicate_records_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    fs::write(&path, "{\"sample_id\": \n").unwrap();
    assert!(matches!(
        load_manifest(&path),
        Err(Error::MalformedRecord { line: 1, .. })
    ));
    let r = one_record("Anger");
    fs::write(&path, format!("{r}\n{r}\n")).unwrap();
    let err = load_manifest(&path).unwrap_err();
    assert_eq!(err.kind(), "DuplicateFrame");
}

#[test]
fn manifests_round_trip_and_rebase_image_paths() {
    let dir = tempfile::tempdir().unwrap();
    let written = write_fixture(dir.path(), 3, 2, 1, 32).unwrap();
    let loaded = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(loaded.manifest, written.manifest);

    let moved = dir.path().join("nested/out.jsonl");
    fs::create_dir_all(moved.parent().unwrap()).unwrap();
    save_manifest(&moved, &loaded.manifest, &loaded.root).unwrap();
    let again = load_manifest(&moved).unwrap();
    assert_eq!(again.manifest.len(), 6);
    let samples = again.load_samples().unwrap();
    for (s, r) in samples.iter().zip(loaded.manifest.samples()) {
        assert_eq!(s.image, render_image(r, 1, 32));
        assert_eq!(
            read_png(&again.image_path(&again.manifest.samples()[0]))
                .unwrap()
                .height(),
            32
        );
    }
}
