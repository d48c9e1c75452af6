use mf2::config::RunConfig;
use mf2::harness::{
    build_model, evaluate_timed, pretrain, run_transition, Dataset, Quiet, Task, Variant,
};
use mf2_core::metrics::MetricsReport;

fn fast_config(epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.epochs = epochs;
    cfg.train.finetune_epochs = epochs;
    cfg.train.batch_size = 2;
    cfg.train.lr = 0.005;
    cfg.train.finetune_lr = Some(0.05);
    cfg
}

fn scores(m: &MetricsReport) -> (String, String) {
    (
        serde_json::to_string(&m.per_au_f1).unwrap(),
        serde_json::to_string(&m.per_emotion_acc).unwrap(),
    )
}

#[test]
fn overfit_fixture_halves_recognition_loss() {
    let data = Dataset::fixture(8, 1, 3, 32).unwrap();
    let cfg = fast_config(30);
    let mut model = build_model(&cfg).unwrap();
    let rec = pretrain(&cfg, &mut model, Task::Both, &data, None, &mut Quiet).unwrap();
    let ce = |l: &mf2::harness::LossSummary| l.ce_au + l.ce_emo;
    assert!(
        ce(&rec.final_loss) < ce(&rec.initial_loss) / 2.0,
        "{:?} -> {:?}",
        rec.initial_loss,
        rec.final_loss
    );
    assert_eq!(rec.history.len(), 30);
}

#[test]
fn same_seed_gives_identical_records() {
    let data = Dataset::fixture(4, 1, 1, 32).unwrap();
    let cfg = fast_config(2);
    let run = || {
        let mut m = build_model(&cfg).unwrap();
        let r = pretrain(&cfg, &mut m, Task::Both, &data, None, &mut Quiet).unwrap();
        (r.final_loss, scores(&r.metrics), r.backbone_checksum)
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_epochs_only_evaluates() {
    let data = Dataset::fixture(4, 1, 1, 32).unwrap();
    let cfg = fast_config(0);
    let mut model = build_model(&cfg).unwrap();
    let untrained = evaluate_timed(&model, &data, 8).unwrap();
    let before = model.store.checksum(|_| true);
    let rec = pretrain(&cfg, &mut model, Task::Both, &data, None, &mut Quiet).unwrap();
    assert!(rec.history.is_empty());
    assert_eq!(rec.final_loss, rec.initial_loss);
    assert_eq!(scores(&rec.metrics), scores(&untrained));
    assert_eq!(model.store.checksum(|_| true), before);
}

#[test]
fn transition_beats_the_untrained_model() {
    let data = Dataset::fixture(8, 1, 3, 32).unwrap();
    let r = run_transition(&fast_config(30), &data, None, &mut Quiet).unwrap();
    assert_eq!(r.pretrain.task, Task::Au);
    assert_eq!(r.finetune.task, Task::Emotion);
    let first = r.pretrain.history.first().unwrap().loss.ce_au;
    let last = r.pretrain.history.last().unwrap().loss.ce_au;
    assert!(last < first, "AU CE {first} -> {last}");
    assert_eq!(r.finetune.backbone_checksum, r.pretrain.backbone_checksum);
    assert!(r.finetune.freeze.is_some());
    assert!(
        r.finetune.metrics.emotion_macro_acc >= r.baseline.emotion_macro_acc,
        "{} vs untrained {}",
        r.finetune.metrics.emotion_macro_acc,
        r.baseline.emotion_macro_acc
    );
}

#[test]
fn variant_lists_parse() {
    assert_eq!(Variant::parse_list("all").unwrap(), Variant::ALL.to_vec());
    assert_eq!(
        Variant::parse_list("dfn_finetune, wo_emo_vl").unwrap(),
        vec![Variant::WithoutEmoVl, Variant::DfnFinetune]
    );
    assert!(Variant::parse_list("lora").is_err());
}
