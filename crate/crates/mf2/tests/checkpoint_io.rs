use mf2::checkpoint::Checkpoint;
use mf2::config::RunConfig;
use mf2::harness::{build_model, evaluate_timed, Dataset};
use mf2_core::dfn::DfnConfig;

#[test]
fn round_trip_restores_identical_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let cfg = RunConfig::default();
    let mut model = build_model(&cfg).unwrap();
    model.attach_dfn(&DfnConfig::default()).unwrap();
    model.freeze_backbone().unwrap();
    Checkpoint::from_model(&model, serde_json::json!({"seed": 0}))
        .save(&path)
        .unwrap();

    let (ck, restored, report) = Checkpoint::load_model(&path, true).unwrap();
    assert!(report.is_exact());
    assert_eq!(report.loaded, model.store.len());
    assert_eq!(ck.run_config["seed"], 0);
    assert_eq!(
        restored.store.checksum(|_| true),
        model.store.checksum(|_| true)
    );
    assert_eq!(
        restored.store.trainable_count(),
        model.store.trainable_count()
    );
    let data = Dataset::fixture(2, 1, 0, 32).unwrap();
    let a = evaluate_timed(&model, &data, 2).unwrap();
    let b = evaluate_timed(&restored, &data, 2).unwrap();
    assert_eq!(a.per_au_f1, b.per_au_f1);
    assert_eq!(a.per_emotion_acc, b.per_emotion_acc);
}

#[test]
fn strict_loading_refuses_mismatches() {
    let cfg = RunConfig::default();
    let model = build_model(&cfg).unwrap();
    let mut ck = Checkpoint::from_model(&model, serde_json::Value::Null);
    let dropped = ck.tensors.pop().unwrap();
    let err = ck.to_model(true).unwrap_err();
    assert!(err.contains("1 missing"), "{err}");
    let (_, report) = ck.to_model(false).unwrap();
    assert_eq!(report.missing, vec![dropped.name]);

    let mut target = build_model(&cfg).unwrap();
    target.attach_dfn(&DfnConfig::default()).unwrap();
    let report = Checkpoint::from_model(&model, serde_json::Value::Null)
        .load_into(&mut target, false)
        .unwrap();
    assert!(!report.missing.is_empty());
    assert!(report.unexpected.is_empty());
}

#[test]
fn malformed_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    std::fs::write(&path, "{\"format\": 3}").unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap_err().kind(), "Checkpoint");
    assert_eq!(
        Checkpoint::load(&dir.path().join("none.json"))
            .unwrap_err()
            .kind(),
        "Io"
    );
}
