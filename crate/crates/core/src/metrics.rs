//! Per-AU F1 and per-class accuracy, reported in percent.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{AuId, Emotion, N_AUS};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MetricsError {
    ShapeMismatch {
        predictions: (usize, usize),
        targets: (usize, usize),
    },
    NonBinary {
        row: usize,
        col: usize,
        value: u8,
    },
    UnknownClassId(usize),
    Empty,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::ShapeMismatch {
                predictions,
                targets,
            } => {
                write!(
                    f,
                    "predictions {predictions:?} and targets {targets:?} differ in shape"
                )
            }
            MetricsError::NonBinary { row, col, value } => {
                write!(f, "value {value} at ({row}, {col}) is not 0 or 1")
            }
            MetricsError::UnknownClassId(c) => write!(f, "class id {c} is out of range"),
            MetricsError::Empty => f.write_str("no samples to score"),
        }
    }
}

impl core::error::Error for MetricsError {}

fn shape(rows: &[Vec<u8>]) -> (usize, usize) {
    (rows.len(), rows.first().map_or(0, Vec::len))
}

fn check_binary(rows: &[Vec<u8>]) -> Result<(), MetricsError> {
    for (r, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            if v > 1 {
                return Err(MetricsError::NonBinary {
                    row: r,
                    col: c,
                    value: v,
                });
            }
        }
    }
    Ok(())
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct F1Scores {
    /// Percent, one per column.
    pub per_label: Vec<f64>,
    /// Unweighted mean of `per_label`.
    pub macro_f1: f64,
}

/// F1 per column of `[N, K]` binary predictions against binary targets.
/// A column whose `2·TP + FP + FN` is zero scores 0.
pub fn f1_per_au(predictions: &[Vec<u8>], targets: &[Vec<u8>]) -> Result<F1Scores, MetricsError> {
    let (ps, ts) = (shape(predictions), shape(targets));
    let ragged =
        predictions.iter().any(|r| r.len() != ps.1) || targets.iter().any(|r| r.len() != ts.1);
    if ps != ts || ragged {
        return Err(MetricsError::ShapeMismatch {
            predictions: ps,
            targets: ts,
        });
    }
    if ps.0 == 0 {
        return Err(MetricsError::Empty);
    }
    check_binary(predictions)?;
    check_binary(targets)?;
    let mut per_label = vec![0.0; ps.1];
    for (k, f1) in per_label.iter_mut().enumerate() {
        let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
        for (p, t) in predictions.iter().zip(targets) {
            match (p[k], t[k]) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fne += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fne;
        *f1 = if denom == 0 {
            0.0
        } else {
            100.0 * 2.0 * tp as f64 / denom as f64
        };
    }
    Ok(F1Scores {
        macro_f1: mean(&per_label),
        per_label,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassAccuracy {
    /// Percent per class id; `None` for classes absent from the targets.
    pub per_class: Vec<Option<f64>>,
    /// Unweighted mean over the classes present.
    pub macro_accuracy: f64,
}

pub fn accuracy_per_class(
    predictions: &[usize],
    targets: &[usize],
    n_classes: usize,
) -> Result<ClassAccuracy, MetricsError> {
    if predictions.len() != targets.len() {
        return Err(MetricsError::ShapeMismatch {
            predictions: (predictions.len(), 1),
            targets: (targets.len(), 1),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(&bad) = predictions.iter().chain(targets).find(|&&c| c >= n_classes) {
        return Err(MetricsError::UnknownClassId(bad));
    }
    let mut hit = vec![0usize; n_classes];
    let mut seen = vec![0usize; n_classes];
    for (&p, &t) in predictions.iter().zip(targets) {
        seen[t] += 1;
        if p == t {
            hit[t] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = hit
        .iter()
        .zip(&seen)
        .map(|(&h, &n)| (n > 0).then(|| 100.0 * h as f64 / n as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(ClassAccuracy {
        macro_accuracy: mean(&present),
        per_class,
    })
}

/// Label → score pairs that serialize as a map in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OrderedScores(pub Vec<(String, Option<f64>)>);

impl OrderedScores {
    pub fn get(&self, label: &str) -> Option<f64> {
        self.0
            .iter()
            .find(|(l, _)| l == label)
            .and_then(|(_, v)| *v)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|(l, _)| l.as_str())
    }
}

impl Serialize for OrderedScores {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            m.serialize_entry(k, v)?;
        }
        m.end()
    }
}

impl<'de> Deserialize<'de> for OrderedScores {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = OrderedScores;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map of label to score")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut a: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some(entry) = a.next_entry()? {
                    out.push(entry);
                }
                Ok(OrderedScores(out))
            }
        }
        d.deserialize_map(V)
    }
}

/// Recognition scores of one evaluation run. Scores are percent; AU
/// columns follow AU table order and emotion columns follow class order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_au_f1: OrderedScores,
    pub au_macro_f1: f64,
    pub per_emotion_acc: OrderedScores,
    pub emotion_macro_acc: f64,
    pub n_samples: usize,
    pub trainable_params: usize,
    /// Seconds.
    pub train_time_per_epoch: f64,
    /// Seconds.
    pub infer_time_per_epoch: f64,
}

impl MetricsReport {
    /// Scores thresholded AU predictions and arg-max emotion predictions.
    /// Parameter and timing fields start at zero.
    pub fn compute(
        au_pred: &[Vec<u8>],
        au_true: &[Vec<u8>],
        emo_pred: &[Emotion],
        emo_true: &[Emotion],
    ) -> Result<Self, MetricsError> {
        let f1 = f1_per_au(au_pred, au_true)?;
        if f1.per_label.len() != N_AUS {
            return Err(MetricsError::ShapeMismatch {
                predictions: shape(au_pred),
                targets: (au_true.len(), N_AUS),
            });
        }
        let p: Vec<usize> = emo_pred.iter().map(|e| e.index()).collect();
        let t: Vec<usize> = emo_true.iter().map(|e| e.index()).collect();
        let acc = accuracy_per_class(&p, &t, Emotion::ALL.len())?;
        Ok(Self {
            per_au_f1: OrderedScores(
                AuId::all()
                    .zip(&f1.per_label)
                    .map(|(au, &v)| (alloc::format!("AU{}", au.number()), Some(v)))
                    .collect(),
            ),
            au_macro_f1: f1.macro_f1,
            per_emotion_acc: OrderedScores(
                Emotion::ALL
                    .iter()
                    .zip(&acc.per_class)
                    .map(|(e, &v)| (String::from(e.name()), v))
                    .collect(),
            ),
            emotion_macro_acc: acc.macro_accuracy,
            n_samples: p.len(),
            trainable_params: 0,
            train_time_per_epoch: 0.0,
            infer_time_per_epoch: 0.0,
        })
    }
}
