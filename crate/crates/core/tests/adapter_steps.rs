use mf2_core::annotation::CaptionBudgets;
use mf2_core::data::fixture::{make_fixture_manifest, render_image};
use mf2_core::data::FaceSample;
use mf2_core::dfn::DfnConfig;
use mf2_core::encoders::{AuLandmarkMap, Tokenizer};
use mf2_core::model::{
    labeled_sample, Mf2Config, Mf2Model, PreparedCaptions, SampleCaptions, TrainRef,
};
use mf2_core::train::{TrainConfig, TrainError, Trainer};

fn fixture(n: usize) -> Vec<FaceSample> {
    make_fixture_manifest(n, 1, 2, 32)
        .unwrap()
        .samples()
        .iter()
        .map(|r| labeled_sample(r, render_image(r, 2, 32)).unwrap())
        .collect()
}

fn adapted_model() -> Mf2Model {
    let mut m = Mf2Model::new(
        Mf2Config::toy(),
        Tokenizer::builtin(),
        AuLandmarkMap::default(),
    )
    .unwrap();
    m.attach_dfn(&DfnConfig::default()).unwrap();
    m.freeze_backbone().unwrap();
    m
}

fn captions(m: &Mf2Model, s: &[FaceSample]) -> Vec<PreparedCaptions> {
    s.iter()
        .map(|x| {
            m.prepare_captions(&SampleCaptions::mock(x, 2), &CaptionBudgets::default())
                .unwrap()
        })
        .collect()
}

fn trainer(lr: f64) -> Trainer {
    Trainer::new(
        TrainConfig {
            lr,
            warmup_steps: Some(0),
            ..TrainConfig::default()
        },
        10,
    )
}

#[test]
fn five_adapter_steps_reduce_recognition_loss() {
    let mut m = adapted_model();
    let s = fixture(4);
    let c = captions(&m, &s);
    let batch: Vec<TrainRef<'_>> = s
        .iter()
        .zip(&c)
        .map(|(sample, captions)| TrainRef { sample, captions })
        .collect();
    let backbone = m.backbone_checksum();
    let mut t = trainer(0.05);
    let ce: Vec<f64> = (0..6)
        .map(|_| {
            let r = t.step(&mut m, &batch).unwrap();
            r.ce_au + r.ce_emo
        })
        .collect();
    let decreases = ce.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(decreases >= 4, "{ce:?}");
    assert_eq!(m.backbone_checksum(), backbone);
}

#[test]
fn zero_learning_rate_moves_nothing() {
    let mut m = adapted_model();
    let s = fixture(2);
    let c = captions(&m, &s);
    let batch: Vec<TrainRef<'_>> = s
        .iter()
        .zip(&c)
        .map(|(sample, captions)| TrainRef { sample, captions })
        .collect();
    let all = m.store.checksum(|_| true);
    trainer(0.0).step(&mut m, &batch).unwrap();
    assert_eq!(m.store.checksum(|_| true), all);
}

#[test]
fn non_finite_loss_aborts_the_step() {
    let mut m = adapted_model();
    let s = fixture(2);
    let c = captions(&m, &s);
    let batch: Vec<TrainRef<'_>> = s
        .iter()
        .zip(&c)
        .map(|(sample, captions)| TrainRef { sample, captions })
        .collect();
    let id = m.dfn.as_ref().unwrap().heads.emotion.weight;
    m.store.value_mut(id).data_mut()[0] = f64::NAN;
    let before = m.store.checksum(|_| true);
    let mut t = trainer(0.01);
    assert_eq!(
        t.step(&mut m, &batch).unwrap_err(),
        TrainError::NaNLoss { step: 1 }
    );
    assert_eq!(m.store.checksum(|_| true), before);
}
