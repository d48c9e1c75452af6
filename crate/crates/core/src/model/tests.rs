use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::annotation::CaptionBudgets;
use crate::data::fixture::{make_fixture_manifest, render_image};
use crate::dfn::{Activation, DfnConfig, Tap};
use crate::encoders::regions::AuAnchor;
use crate::gradcheck::relative_error;
use crate::train::{TrainConfig, Trainer};

fn config(dim: usize, blocks: usize) -> Mf2Config {
    let mut c = Mf2Config::toy();
    c.encoder.embed_dim = dim;
    c.encoder.ffn_dim = 2 * dim;
    c.qformer_emo.n_blocks = blocks;
    c.qformer_au.n_blocks = blocks;
    c.qformer_emo.ffn_dim = 2 * dim;
    c.qformer_au.ffn_dim = 2 * dim;
    c
}

fn model(c: Mf2Config) -> Mf2Model {
    Mf2Model::new(c, Tokenizer::builtin(), AuLandmarkMap::default()).unwrap()
}

fn samples(n: usize) -> Vec<FaceSample> {
    make_fixture_manifest(n, 1, 7, 32)
        .unwrap()
        .samples()
        .iter()
        .map(|r| labeled_sample(r, render_image(r, 7, 32)).unwrap())
        .collect()
}

fn prepared(m: &Mf2Model, s: &[FaceSample]) -> Vec<PreparedCaptions> {
    s.iter()
        .map(|x| {
            m.prepare_captions(&SampleCaptions::mock(x, 1), &CaptionBudgets::default())
                .unwrap()
        })
        .collect()
}

fn refs<'a>(s: &'a [FaceSample], c: &'a [PreparedCaptions]) -> Vec<TrainRef<'a>> {
    s.iter()
        .zip(c)
        .map(|(sample, captions)| TrainRef { sample, captions })
        .collect()
}

fn report(m: &Mf2Model, s: &[FaceSample], c: &[PreparedCaptions]) -> LossReport {
    let mut g = Graph::new(&m.store);
    m.forward_train(&mut g, &refs(s, c), 5).unwrap().report
}

fn infer(m: &Mf2Model, s: &[FaceSample]) -> (Matrix, Matrix) {
    let mut g = Graph::new(&m.store);
    let faces: Vec<FaceInput<'_>> = s.iter().map(FaceInput::from).collect();
    let out = m.forward_infer(&mut g, &faces).unwrap();
    (
        g.value(out.emotion_logits).clone(),
        g.value(out.au_logits).clone(),
    )
}

#[test]
fn loss_report_is_complete_and_consistent() {
    let m = model(Mf2Config::toy());
    let s = samples(3);
    let c = prepared(&m, &s);
    let r = report(&m, &s, &c);
    let emo = r.emo.unwrap();
    let au = r.au.unwrap();
    let terms = [
        emo.itc, emo.itm, emo.itg, au.itc, au.itm, au.itg, r.ce_au, r.ce_emo,
    ];
    assert!(terms.iter().all(|t| t.is_finite() && *t > 0.0));
    assert!((r.total - total_loss(&r, &m.config.loss)).abs() < 1e-6);
    assert_eq!(r.au_per_au.len(), N_AUS);
}

#[test]
fn total_loss_arithmetic() {
    let w = LossWeights::default();
    assert_eq!(total_loss(&LossReport::default(), &w), 0.0);
    let ones = BranchLosses {
        itc: 1.0,
        itm: 1.0,
        itg: 1.0,
    };
    let r = LossReport {
        emo: Some(ones),
        au: Some(ones),
        ce_au: 1.0,
        ce_emo: 1.0,
        ..LossReport::default()
    };
    assert_eq!(total_loss(&r, &w), 8.0);
    let w = LossWeights {
        itc: 0.0,
        itm: 0.0,
        itg: 0.0,
        ce_au: 0.0,
        ce_emo: 2.0,
    };
    let r = LossReport {
        ce_emo: 0.5,
        ..LossReport::default()
    };
    assert_eq!(total_loss(&r, &w), 1.0);
    assert!(LossWeights { ce_emo: 0.0, ..w }.validate().is_err());
}

#[test]
fn identical_au_inputs_give_identical_losses() {
    let mut map = AuLandmarkMap::default();
    let first = map.0[&AuId::from_number(1).unwrap()].clone();
    map.0.insert(AuId::from_number(2).unwrap(), first);
    let m = Mf2Model::new(Mf2Config::toy(), Tokenizer::builtin(), map).unwrap();
    let s = samples(2);
    let mut c = prepared(&m, &s);
    for p in &mut c {
        p.au[1] = p.au[0].clone();
    }
    let r = report(&m, &s, &c);
    assert_eq!(r.au_per_au[0], r.au_per_au[1]);
    assert_ne!(r.au_per_au[0], r.au_per_au[2]);
}

#[test]
fn missing_au_caption_is_reported() {
    let m = model(Mf2Config::toy());
    let s = samples(1);
    let mut caps = SampleCaptions::mock(&s[0], 0);
    caps.au[2] = None;
    assert_eq!(
        m.prepare_captions(&caps, &CaptionBudgets::default()),
        Err(ModelError::MissingCaption(AuId::from_number(4).unwrap()))
    );
    let mut caps = SampleCaptions::mock(&s[0], 0);
    caps.emotion = None;
    assert_eq!(
        m.prepare_captions(&caps, &CaptionBudgets::default()),
        Err(ModelError::MissingEmotionCaption)
    );
}

#[test]
fn inference_reads_images_only_and_batches_exactly() {
    let m = model(Mf2Config::toy());
    let s = samples(3);
    m.reset_text_calls();
    let (e, a) = infer(&m, &s);
    assert_eq!(m.text_calls(), 0);
    assert_eq!(e.shape(), (3, 8));
    assert_eq!(a.shape(), (3, 12));
    assert!(e.is_finite() && a.is_finite());
    for (i, x) in s.iter().enumerate() {
        let (e1, a1) = infer(&m, core::slice::from_ref(x));
        assert_eq!(e1.row(0), e.row(i));
        assert_eq!(a1.row(0), a.row(i));
    }
}

#[test]
fn contrastive_features_equal_inference_features() {
    let m = model(Mf2Config::toy());
    let s = samples(2);
    let c = prepared(&m, &s);
    let mut g = Graph::new(&m.store);
    let out = m.forward_train(&mut g, &refs(&s, &c), 0).unwrap();
    let train_logits = g.value(out.au_logits).clone();
    let (_, a) = infer(&m, &s);
    assert_eq!(train_logits, a);
}

#[test]
fn au_logits_depend_only_on_their_own_region() {
    let mut map = AuLandmarkMap::default();
    let au15 = AuId::from_number(15).unwrap();
    map.0.insert(
        au15,
        AuAnchor {
            landmarks: vec![0],
            offset: [0.0, 0.0],
        },
    );
    let m = Mf2Model::new(Mf2Config::toy(), Tokenizer::builtin(), map).unwrap();
    let mut s = samples(1);
    let (_, before) = infer(&m, &s);
    s[0].landmarks.0[0] = [30.0, 30.0];
    let (_, after) = infer(&m, &s);
    for j in 0..N_AUS {
        if j == au15.index() {
            assert_ne!(after.get(0, j), before.get(0, j));
        } else {
            assert_eq!(after.get(0, j), before.get(0, j));
        }
    }
}

#[test]
fn local_qformer_is_one_parameter_set() {
    let m = model(Mf2Config::toy());
    let mut store = ParamStore::new();
    let mut r = rng::stream(0, "x");
    QFormer::new(
        &mut Builder::new(&mut store, &mut r),
        "au.qformer",
        m.dim(),
        m.tokenizer.len(),
        &m.config.qformer_au,
    );
    assert_eq!(m.store.count_prefix("au.qformer."), store.total_count());
}

#[test]
fn single_branch_models_are_about_half() {
    let full = model(Mf2Config::toy()).store.total_count() as f64;
    for b in [Branches::AuOnly, Branches::EmotionOnly] {
        let c = Mf2Config {
            branches: b,
            ..Mf2Config::toy()
        };
        let ratio = model(c).store.total_count() as f64 / full;
        assert!((0.45..0.55).contains(&ratio), "{b:?}: {ratio}");
    }
}

#[test]
fn single_branch_models_train() {
    for b in [Branches::AuOnly, Branches::EmotionOnly] {
        let m = model(Mf2Config {
            branches: b,
            ..Mf2Config::toy()
        });
        let s = samples(2);
        let c = prepared(&m, &s);
        let r = report(&m, &s, &c);
        assert_eq!(r.emo.is_some(), b == Branches::EmotionOnly);
        assert!(r.total.is_finite());
        let (e, a) = infer(&m, &s);
        assert_eq!((e.rows(), a.cols()), (2, 12));
    }
}

#[test]
fn three_step_trajectory_is_deterministic() {
    let run = || {
        let mut m = model(Mf2Config::toy());
        let s = samples(2);
        let c = prepared(&m, &s);
        let mut t = Trainer::new(
            TrainConfig {
                lr: 1e-3,
                ..TrainConfig::default()
            },
            3,
        );
        (0..3)
            .map(|_| t.step(&mut m, &refs(&s, &c)).unwrap().total)
            .collect::<Vec<_>>()
    };
    let a = run();
    assert_eq!(a, run());
    assert_ne!(a[0], a[2]);
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let mut m = model(config(8, 1));
    let s = samples(2);
    let c = prepared(&m, &s);
    let loss = |m: &Mf2Model| {
        let mut g = Graph::new(&m.store);
        m.forward_train(&mut g, &refs(&s, &c), 11)
            .unwrap()
            .report
            .total
    };
    let grads = {
        let mut g = Graph::new(&m.store);
        let out = m.forward_train(&mut g, &refs(&s, &c), 11).unwrap();
        let grads = g.backward(out.total);
        let ids: Vec<_> = m.store.iter().map(|(id, _)| id).collect();
        ids.into_iter()
            .map(|id| (id, grads.param(id).cloned()))
            .collect::<Vec<_>>()
    };
    let eps = 1e-5;
    let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (id, grad) in grads {
        let name = String::from(m.store.get(id).name());
        let n = m.store.value(id).len();
        let grad = grad.unwrap_or_else(|| {
            let (r, c) = m.store.value(id).shape();
            Matrix::zeros(r, c)
        });
        let largest = (0..n).fold(0, |b, k| {
            if grad.data()[k].abs() > grad.data()[b].abs() {
                k
            } else {
                b
            }
        });
        let other = (rng::hash64(3, name.as_bytes()) as usize) % n;
        let group: Vec<&str> = name.splitn(4, '.').take(3).collect();
        let entry = groups.entry(group.join(".")).or_default();
        for k in [largest, other] {
            let orig = m.store.value(id).data()[k];
            m.store.value_mut(id).data_mut()[k] = orig + eps;
            let up = loss(&m);
            m.store.value_mut(id).data_mut()[k] = orig - eps;
            let down = loss(&m);
            m.store.value_mut(id).data_mut()[k] = orig;
            entry.0.push(grad.data()[k]);
            entry.1.push((up - down) / (2.0 * eps));
        }
    }
    assert!(groups.len() > 10);
    for (group, (a, n)) in groups {
        let a = Matrix::row_vector(a);
        let n = Matrix::row_vector(n);
        let err = relative_error(&a, &n);
        assert!(err <= 1e-3, "{group}: relative error {err}");
    }
}

fn dfn_config(r: usize) -> DfnConfig {
    DfnConfig {
        r,
        ..DfnConfig::default()
    }
}

#[test]
fn blockwise_attach_creates_four_cells_per_block() {
    for n in 1..=3 {
        let mut m = model(config(8, n));
        m.attach_dfn(&dfn_config(2)).unwrap();
        assert_eq!(m.dfn.as_ref().unwrap().cell_count(), 4 * n);
        assert_eq!(m.attach_dfn(&dfn_config(2)), Err(DfnError::AlreadyAttached));
    }
    let mut m = model(config(8, 2));
    let cls = DfnConfig {
        tap: Tap::ClsLastLayer,
        ..dfn_config(2)
    };
    m.attach_dfn(&cls).unwrap();
    assert_eq!(m.dfn.as_ref().unwrap().cell_count(), 4 * 7);
}

#[test]
fn attach_checks_width_and_freeze_needs_attach() {
    let mut m = model(config(8, 1));
    assert_eq!(m.freeze_backbone(), Err(DfnError::NotAttached));
    let bad = DfnConfig {
        dim: Some(16),
        ..dfn_config(2)
    };
    assert!(matches!(
        m.attach_dfn(&bad),
        Err(DfnError::ConfigMismatch { .. })
    ));
}

#[test]
fn toy_trainable_count_is_cells_plus_heads() {
    let mut m = model(config(8, 1));
    m.attach_dfn(&dfn_config(2)).unwrap();
    let rep = m.freeze_backbone().unwrap();
    let heads = 8 * 8 + 8 + 12 * (8 + 1);
    assert_eq!(rep.trainable_param_count, 4 * 42 + heads);
    assert_eq!(
        rep.frozen_param_count + rep.trainable_param_count,
        m.store.total_count()
    );
    assert!(rep.trainable_fraction < 0.25);
}

#[test]
fn adapter_pathways_are_disjoint() {
    let mut m = model(config(8, 2));
    m.attach_dfn(&dfn_config(2)).unwrap();
    let d = m.dfn.as_ref().unwrap();
    let sets = [
        d.emo.as_ref().unwrap().visual_params(),
        d.emo.as_ref().unwrap().text_params(),
        d.au.as_ref().unwrap().visual_params(),
        d.au.as_ref().unwrap().text_params(),
    ];
    for i in 0..4 {
        for j in i + 1..4 {
            assert!(sets[i].iter().all(|p| !sets[j].contains(p)));
        }
    }
}

#[test]
fn zero_initialized_adapters_are_neutral() {
    for tap in [Tap::Blockwise, Tap::ClsLastLayer] {
        for activation in [Activation::Relu, Activation::Sigmoid] {
            let mut m = model(config(8, 2));
            let s = samples(2);
            let before = infer(&m, &s);
            let cfg = DfnConfig {
                tap,
                activation,
                reinit_heads: false,
                ..dfn_config(2)
            };
            m.attach_dfn(&cfg).unwrap();
            assert_eq!(infer(&m, &s), before, "{tap:?} {activation:?}");
        }
    }
}

#[test]
fn finetune_step_moves_only_adapters() {
    let mut m = model(config(8, 1));
    m.attach_dfn(&dfn_config(2)).unwrap();
    m.freeze_backbone().unwrap();
    let s = samples(2);
    let c = prepared(&m, &s);
    {
        let mut g = Graph::new(&m.store);
        let out = m.forward_train(&mut g, &refs(&s, &c), 0).unwrap();
        let grads = g.backward(out.total);
        for (id, p) in m.store.iter() {
            let gr = grads.param(id);
            if p.trainable() {
                continue;
            }
            assert!(gr.map_or(true, |x| x.norm_sq() == 0.0), "{}", p.name());
        }
        let d = m.dfn.as_ref().unwrap();
        for set in [
            d.emo.as_ref().unwrap().visual_params(),
            d.emo.as_ref().unwrap().text_params(),
            d.au.as_ref().unwrap().visual_params(),
            d.au.as_ref().unwrap().text_params(),
        ] {
            let norm: f64 = set
                .iter()
                .filter_map(|&id| grads.param(id))
                .map(Matrix::norm_sq)
                .sum();
            assert!(norm > 0.0);
        }
    }
    let backbone = m.backbone_checksum();
    let adapters = m.adapter_checksum();
    let mut t = Trainer::new(
        TrainConfig {
            lr: 0.0,
            warmup_steps: Some(0),
            ..TrainConfig::default()
        },
        1,
    );
    t.step(&mut m, &refs(&s, &c)).unwrap();
    assert_eq!(m.adapter_checksum(), adapters);
    let mut t = Trainer::new(
        TrainConfig {
            lr: 1e-3,
            warmup_steps: Some(0),
            ..TrainConfig::default()
        },
        1,
    );
    t.step(&mut m, &refs(&s, &c)).unwrap();
    assert_eq!(m.backbone_checksum(), backbone);
    assert_ne!(m.adapter_checksum(), adapters);
}

#[test]
fn nan_loss_leaves_parameters_untouched() {
    let mut m = model(config(8, 1));
    let s = samples(2);
    let c = prepared(&m, &s);
    let id = m.heads.emotion.weight;
    m.store.value_mut(id).data_mut()[0] = f64::NAN;
    let before = m.store.checksum(|_| true);
    let mut t = Trainer::new(TrainConfig::default(), 1);
    assert!(matches!(
        t.step(&mut m, &refs(&s, &c)),
        Err(crate::train::TrainError::NaNLoss { .. })
    ));
    assert_eq!(m.store.checksum(|_| true), before);
    assert_eq!(t.steps_done(), 0);
}

#[test]
fn full_scale_trainable_fraction() {
    let m = Mf2Model::build(
        Mf2Config::full_scale(),
        Tokenizer::builtin(),
        AuLandmarkMap::default(),
        ParamStore::shape_only(),
    )
    .unwrap();
    let mut m = m;
    m.attach_dfn(&DfnConfig::full_scale()).unwrap();
    let rep = m.freeze_backbone().unwrap();
    std::println!(
        "total {} trainable {} fraction {}",
        m.store.total_count(),
        rep.trainable_param_count,
        rep.trainable_fraction
    );
    assert!((0.10..=0.20).contains(&rep.trainable_fraction));
}
