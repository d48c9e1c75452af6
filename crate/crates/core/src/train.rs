//! Optimizer loop, batching and evaluation helpers.

use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{Emotion, FaceSample};
use crate::metrics::{MetricsError, MetricsReport};
use crate::model::{FaceInput, LossReport, Mf2Model, ModelError, TrainRef};
use crate::optim::{AdamW, AdamWConfig, WarmupSchedule};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` scales the warm-up to `min(2000, total_steps / 10)`.
    pub warmup_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.05,
            epochs: 30,
            batch_size: 8,
            warmup_steps: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainError {
    /// Loss or gradient was not finite; parameters were left untouched.
    NaNLoss {
        step: usize,
    },
    Model(ModelError),
    Metrics(MetricsError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::NaNLoss { step } => write!(f, "non-finite loss at step {step}"),
            TrainError::Model(e) => e.fmt(f),
            TrainError::Metrics(e) => e.fmt(f),
        }
    }
}

impl core::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<MetricsError> for TrainError {
    fn from(e: MetricsError) -> Self {
        TrainError::Metrics(e)
    }
}

/// AdamW plus warm-up over a fixed number of steps.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub schedule: WarmupSchedule,
    opt: AdamW,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, total_steps: usize) -> Self {
        let schedule = match config.warmup_steps {
            Some(w) => WarmupSchedule {
                base_lr: config.lr,
                warmup_steps: w,
            },
            None => WarmupSchedule::scaled(config.lr, total_steps),
        };
        let opt = AdamW::new(AdamWConfig {
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        });
        Self {
            config,
            schedule,
            opt,
            step: 0,
        }
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One forward, backward and update. On a non-finite loss or gradient
    /// nothing changes, including the step counter.
    pub fn step(
        &mut self,
        model: &mut Mf2Model,
        batch: &[TrainRef<'_>],
    ) -> Result<LossReport, TrainError> {
        let step_seed = rng::hash64(self.config.seed, &(self.step as u64).to_le_bytes());
        let (report, grads) = {
            let mut g = Graph::new(&model.store);
            let out = model.forward_train(&mut g, batch, step_seed)?;
            if !out.report.total.is_finite() {
                return Err(TrainError::NaNLoss {
                    step: self.step + 1,
                });
            }
            let grads = g.backward(out.total);
            if !grads.all_finite() {
                return Err(TrainError::NaNLoss {
                    step: self.step + 1,
                });
            }
            (out.report, grads)
        };
        self.step += 1;
        let lr = self.schedule.lr(self.step);
        self.opt.step(&mut model.store, &grads, lr);
        Ok(report)
    }
}

/// Index batches for one epoch, shuffled by `(seed, epoch)`.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &alloc::format!("epoch:{epoch}")));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Thresholded AU and arg-max emotion predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub au: Vec<Vec<u8>>,
    pub emotion: Vec<Emotion>,
}

/// Image-only prediction in batches of `batch_size`.
pub fn predict(
    model: &Mf2Model,
    samples: &[&FaceSample],
    batch_size: usize,
) -> Result<Predictions, ModelError> {
    let mut au = Vec::with_capacity(samples.len());
    let mut emotion = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let faces: Vec<FaceInput<'_>> = chunk.iter().map(|&s| s.into()).collect();
        let mut g = Graph::new(&model.store);
        let out = model.forward_infer(&mut g, &faces)?;
        let a = g.value(out.au_logits);
        let e = g.value(out.emotion_logits);
        for i in 0..chunk.len() {
            au.push(a.row(i).iter().map(|&z| u8::from(z > 0.0)).collect());
            let row = e.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            emotion.push(Emotion::from_index(best).expect("eight logits"));
        }
    }
    Ok(Predictions { au, emotion })
}

/// Scores image-only predictions against the samples' labels.
pub fn evaluate(
    model: &Mf2Model,
    samples: &[&FaceSample],
    batch_size: usize,
) -> Result<MetricsReport, TrainError> {
    let p = predict(model, samples, batch_size)?;
    let au_true: Vec<Vec<u8>> = samples.iter().map(|s| s.au_labels.0.to_vec()).collect();
    let emo_true: Vec<Emotion> = samples.iter().map(|s| s.emotion).collect();
    Ok(MetricsReport::compute(
        &p.au, &au_true, &p.emotion, &emo_true,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_every_index_once() {
        let b = epoch_batches(10, 4, 3, 0);
        assert_eq!(
            b.iter().map(Vec::len).collect::<Vec<_>>(),
            alloc::vec![4, 4, 2]
        );
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, epoch_batches(10, 4, 3, 0));
        assert_ne!(b, epoch_batches(10, 4, 3, 1));
    }

    #[test]
    fn warmup_defaults_scale_with_run_length() {
        let t = Trainer::new(TrainConfig::default(), 300);
        assert_eq!(t.schedule.warmup_steps, 30);
        let t = Trainer::new(TrainConfig::default(), 1_000_000);
        assert_eq!(t.schedule.warmup_steps, 2000);
        assert_eq!(t.schedule.lr(2000), 1e-4);
        assert_eq!(t.schedule.lr(1000), 0.5e-4);
    }
}
