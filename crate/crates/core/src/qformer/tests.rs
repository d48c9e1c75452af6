use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::*;
use crate::autograd::Graph;
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::Matrix;

const D: usize = 8;
const NQ: usize = 3;
const VOCAB: usize = 20;

fn build(style: ItgStyle) -> (ParamStore, QFormer) {
    let cfg = QFormerConfig {
        n_blocks: 2,
        n_queries: NQ,
        n_heads: 2,
        ffn_dim: 16,
        itg_style: style,
        d_proj: 4,
        ..QFormerConfig::default()
    };
    let mut store = ParamStore::new();
    let mut r = rng::stream(1, "qformer-test");
    let qf = QFormer::new(&mut Builder::new(&mut store, &mut r), "qf", D, VOCAB, &cfg);
    (store, qf)
}

fn random(rows: usize, seed: u64) -> Matrix {
    let mut r = rng::stream(seed, "probe");
    Matrix::from_vec(
        rows,
        D,
        (0..rows * D).map(|_| r.gen_range(-1.0..1.0)).collect(),
    )
}

struct Out {
    query: Matrix,
    text: Option<Matrix>,
}

fn run(
    store: &ParamStore,
    qf: &QFormer,
    visual: &Matrix,
    text: Option<(&Matrix, &[u8])>,
    mode: Mode,
) -> Out {
    let mut g = Graph::new(store);
    let v = g.constant(visual.clone());
    let emb = text.map(|(t, m)| TextEmbedding {
        tokens: g.constant(t.clone()),
        attention_mask: m.to_vec(),
        truncated: false,
    });
    let st = qf.forward(&mut g, v, emb.as_ref(), mode, None).unwrap();
    Out {
        query: g.value(st.query_out).clone(),
        text: st.text_out.map(|t| g.value(t).clone()),
    }
}

fn perturb_row(m: &Matrix, row: usize) -> Matrix {
    let mut p = m.clone();
    for v in p.row_mut(row) {
        *v += 0.5;
    }
    p
}

#[test]
fn joint_mask_matches_the_mode_rules_exhaustively() {
    for style in [ItgStyle::Masked, ItgStyle::Causal] {
        let (_, qf) = build(style);
        for l in 1..=8 - NQ {
            for pad_bits in 0u32..(1 << l) {
                let text_mask: Vec<u8> =
                    (0..l).map(|j| u8::from(pad_bits & (1 << j) == 0)).collect();
                for mode in [Mode::Itc, Mode::Itm, Mode::Itg] {
                    let m = qf.joint_mask(mode, &text_mask);
                    for i in 0..NQ + l {
                        for j in 0..NQ + l {
                            let qi = i < NQ;
                            let qj = j < NQ;
                            let expected = if !qj && text_mask[j - NQ] == 0 {
                                false
                            } else {
                                match mode {
                                    Mode::Itc => qi == qj,
                                    Mode::Itm => true,
                                    Mode::Itg if qi => qj,
                                    Mode::Itg => qj || style == ItgStyle::Masked || j <= i,
                                    Mode::Infer => unreachable!(),
                                }
                            };
                            assert_eq!(
                                m.allowed(i, j),
                                expected,
                                "{mode:?} {style:?} l={l} ({i},{j})"
                            );
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn contrastive_pass_isolates_queries_from_text() {
    let (store, qf) = build(ItgStyle::Masked);
    let visual = random(5, 0);
    for l in 1..=5 {
        let text = random(l, 10 + l as u64);
        let mask = vec![1u8; l];
        let base = run(&store, &qf, &visual, Some((&text, &mask)), Mode::Itc);
        let infer = run(&store, &qf, &visual, None, Mode::Infer);
        assert_eq!(base.query, infer.query);
        assert!(infer.text.is_none());
        for j in 0..l {
            let other = run(
                &store,
                &qf,
                &visual,
                Some((&perturb_row(&text, j), &mask)),
                Mode::Itc,
            );
            assert_eq!(other.query, base.query);
        }
        let moved = run(
            &store,
            &qf,
            &perturb_row(&visual, 0),
            Some((&text, &mask)),
            Mode::Itc,
        );
        assert_eq!(moved.text, base.text);
    }
}

#[test]
fn generation_pass_hides_text_from_queries() {
    let (store, qf) = build(ItgStyle::Masked);
    let visual = random(5, 0);
    let text = random(4, 3);
    let mask = vec![1u8; 4];
    let base = run(&store, &qf, &visual, Some((&text, &mask)), Mode::Itg);
    for j in 0..4 {
        let other = run(
            &store,
            &qf,
            &visual,
            Some((&perturb_row(&text, j), &mask)),
            Mode::Itg,
        );
        assert_eq!(other.query, base.query);
    }
    let moved = run(
        &store,
        &qf,
        &perturb_row(&visual, 1),
        Some((&text, &mask)),
        Mode::Itg,
    );
    assert_ne!(moved.text, base.text);
}

#[test]
fn causal_generation_only_looks_back() {
    let (store, qf) = build(ItgStyle::Causal);
    let visual = random(5, 0);
    for l in 2..=5 {
        let text = random(l, 20 + l as u64);
        let mask = vec![1u8; l];
        let base = run(&store, &qf, &visual, Some((&text, &mask)), Mode::Itg);
        let base_t = base.text.unwrap();
        for j in 0..l {
            let other = run(
                &store,
                &qf,
                &visual,
                Some((&perturb_row(&text, j), &mask)),
                Mode::Itg,
            );
            let t = other.text.unwrap();
            for i in 0..l {
                if i < j {
                    assert_eq!(t.row(i), base_t.row(i), "row {i} saw position {j}");
                } else if i == j {
                    assert_ne!(t.row(i), base_t.row(i));
                }
            }
        }
    }
}

#[test]
fn matching_pass_mixes_modalities() {
    let (store, qf) = build(ItgStyle::Masked);
    let visual = random(5, 0);
    let text = random(3, 4);
    let mask = vec![1u8; 3];
    let base = run(&store, &qf, &visual, Some((&text, &mask)), Mode::Itm);
    let other = run(
        &store,
        &qf,
        &visual,
        Some((&perturb_row(&text, 2), &mask)),
        Mode::Itm,
    );
    assert_ne!(other.query, base.query);
}

#[test]
fn padded_text_rows_are_invisible() {
    let (store, qf) = build(ItgStyle::Masked);
    let visual = random(5, 0);
    let text = random(4, 5);
    let mask = [1u8, 1, 1, 0];
    for mode in [Mode::Itc, Mode::Itm, Mode::Itg] {
        let base = run(&store, &qf, &visual, Some((&text, &mask)), mode);
        let other = run(
            &store,
            &qf,
            &visual,
            Some((&perturb_row(&text, 3), &mask)),
            mode,
        );
        assert_eq!(other.query, base.query);
        let (a, b) = (other.text.unwrap(), base.text.unwrap());
        for i in 0..3 {
            assert_eq!(a.row(i), b.row(i));
        }
    }
}

#[test]
fn text_path_reuses_query_path_weights() {
    let (store, qf) = build(ItgStyle::Masked);
    for block in &qf.blocks {
        let q = block.query_path_params();
        let t = block.text_path_params();
        assert!(t.iter().all(|id| q.contains(id)));
        for id in block.cross_attn.param_ids() {
            assert!(!t.contains(&id));
        }
    }
    let visual = random(5, 0);
    let text = random(3, 6);
    let mut g = Graph::new(&store);
    let v = g.constant(visual);
    let emb = TextEmbedding {
        tokens: g.constant(text),
        attention_mask: vec![1; 3],
        truncated: false,
    };
    let st = qf.forward(&mut g, v, Some(&emb), Mode::Itc, None).unwrap();
    let t = st.text_out.unwrap();
    let loss = g.sum_all(t);
    let grads = g.backward(loss);
    for block in &qf.blocks {
        for id in block.text_path_params() {
            assert!(grads.param(id).is_some());
        }
        for id in block.cross_attn.param_ids() {
            assert!(grads
                .param(id)
                .map_or(true, |m| m.data().iter().all(|&v| v == 0.0)));
        }
    }
    assert!(grads
        .param(qf.queries)
        .map_or(true, |m| m.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn input_validation() {
    let (store, qf) = build(ItgStyle::Masked);
    let mut g = Graph::new(&store);
    let bad = g.constant(Matrix::zeros(4, D + 1));
    assert_eq!(
        qf.forward(&mut g, bad, None, Mode::Infer, None)
            .unwrap_err(),
        QFormerError::DimMismatch {
            expected: D,
            got: D + 1
        }
    );
    let v = g.constant(Matrix::zeros(4, D));
    assert_eq!(
        qf.forward(&mut g, v, None, Mode::Itc, None).unwrap_err(),
        QFormerError::TextRequired(Mode::Itc)
    );
    assert_eq!("itm".parse::<Mode>(), Ok(Mode::Itm));
    assert!(matches!(
        "nope".parse::<Mode>(),
        Err(QFormerError::UnknownMode(_))
    ));
}

#[test]
fn lm_head_is_tied_to_the_embedding() {
    let (mut store, qf) = build(ItgStyle::Masked);
    let mut r = rng::stream(2, "embed");
    let embed =
        Builder::new(&mut store, &mut r).add("embed", VOCAB, D, crate::params::Init::Normal(0.1));
    let mut g = Graph::new(&store);
    let x = g.constant(random(2, 7));
    let z = qf.lm_logits(&mut g, x, embed);
    assert_eq!(g.shape(z), (2, VOCAB));
    let expected = random(2, 7).matmul_t(store.value(embed));
    assert!(g.value(z).max_abs_diff(&expected) < 1e-12);
}
