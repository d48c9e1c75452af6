//! Training phases, evaluation, the ablation matrix and the
//! pretrain-then-adapt transition scenario.
//!
//! Everything here works on in-memory datasets; the CLI adds files and run
//! directories on top.

mod ablation;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use mf2_core::annotation::CaptionBudgets;
use mf2_core::data::fixture::{make_fixture_manifest, render_image};
use mf2_core::data::FaceSample;
use mf2_core::dfn::{DfnConfig, FreezeReport};
use mf2_core::metrics::MetricsReport;
use mf2_core::model::{
    labeled_sample, LossReport, LossWeights, Mf2Model, PreparedCaptions, SampleCaptions, TrainRef,
};
use mf2_core::rng;
use mf2_core::train::{epoch_batches, evaluate, TrainConfig, Trainer};
use mf2_core::Graph;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::files::ManifestFile;

pub use ablation::{
    run_ablations, run_transition, run_transition_with_model, AblationRecord, TransitionRecord,
    Variant,
};

/// Labeled samples with their caption texts, index-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<FaceSample>,
    pub captions: Vec<SampleCaptions>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Procedural fixture with template captions, entirely in memory.
    pub fn fixture(
        n_videos: usize,
        frames_per_video: usize,
        seed: u64,
        image_size: usize,
    ) -> Result<Self> {
        let manifest = make_fixture_manifest(n_videos, frames_per_video, seed, image_size)?;
        let samples = manifest
            .samples()
            .iter()
            .map(|r| labeled_sample(r, render_image(r, seed, image_size)))
            .collect::<Result<Vec<_>, _>>()?;
        let captions = samples
            .iter()
            .map(|s| SampleCaptions::mock(s, seed))
            .collect();
        Ok(Self { samples, captions })
    }

    /// Loads images and attaches captions by sample id. Samples without
    /// captions get empty ones, which is enough for evaluation.
    pub fn from_manifest(
        file: &ManifestFile,
        captions: Option<&BTreeMap<String, SampleCaptions>>,
    ) -> Result<Self> {
        let samples = file.load_samples()?;
        let captions = samples
            .iter()
            .map(|s| {
                captions
                    .and_then(|c| c.get(&s.sample_id))
                    .cloned()
                    .unwrap_or_else(|| SampleCaptions::from_records([]))
            })
            .collect();
        Ok(Self { samples, captions })
    }

    /// Fails with the first sample that has no caption at all.
    pub fn require_captions(&self) -> Result<()> {
        match self.samples.iter().zip(&self.captions).find(|(_, c)| {
            c.emotion.is_none() && c.key_au.is_none() && c.au.iter().all(Option::is_none)
        }) {
            Some((s, _)) => Err(Error::MissingCaptions(s.sample_id.clone())),
            None => Ok(()),
        }
    }

    pub fn sample_refs(&self) -> Vec<&FaceSample> {
        self.samples.iter().collect()
    }
}

/// Which recognizer a phase optimizes. Alignment losses stay on in every
/// task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Au,
    Emotion,
    #[default]
    Both,
}

impl Task {
    pub fn weights(self, base: LossWeights) -> LossWeights {
        match self {
            Task::Au => LossWeights {
                ce_emo: 0.0,
                ..base
            },
            Task::Emotion => LossWeights { ce_au: 0.0, ..base },
            Task::Both => base,
        }
    }

    /// Validation score used to pick the best epoch.
    pub fn score(self, m: &MetricsReport) -> f64 {
        match self {
            Task::Au => m.au_macro_f1,
            Task::Emotion => m.emotion_macro_acc,
            Task::Both => 0.5 * (m.au_macro_f1 + m.emotion_macro_acc),
        }
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "au" => Ok(Task::Au),
            "emotion" => Ok(Task::Emotion),
            "both" => Ok(Task::Both),
            _ => Err(format!("unknown task {s:?} (expected au, emotion or both)")),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Au => "au",
            Task::Emotion => "emotion",
            Task::Both => "both",
        })
    }
}

/// Batch-mean loss terms; alignment terms are summed over branches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub total: f64,
    pub itc: f64,
    pub itm: f64,
    pub itg: f64,
    pub ce_au: f64,
    pub ce_emo: f64,
}

impl LossSummary {
    fn add(&mut self, r: &LossReport) {
        self.total += r.total;
        for b in r.emo.iter().chain(&r.au) {
            self.itc += b.itc;
            self.itm += b.itm;
            self.itg += b.itg;
        }
        self.ce_au += r.ce_au;
        self.ce_emo += r.ce_emo;
    }

    fn scaled(mut self, k: f64) -> Self {
        for v in [
            &mut self.total,
            &mut self.itc,
            &mut self.itm,
            &mut self.itg,
            &mut self.ce_au,
            &mut self.ce_emo,
        ] {
            *v *= k;
        }
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over the epoch's optimizer steps.
    pub loss: LossSummary,
    pub validation_score: Option<f64>,
    pub seconds: f64,
}

/// Receives progress from long-running phases.
pub trait Observer {
    fn epoch(&mut self, _phase: &str, _log: &EpochLog) {}

    /// Called with the best model so far: after the initial evaluation and
    /// whenever validation improves (every epoch without validation data).
    fn best(&mut self, _phase: &str, _model: &Mf2Model) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct Quiet;

impl Observer for Quiet {}

/// Outcome of one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub name: String,
    pub task: Task,
    pub epochs: usize,
    /// Training objective over the whole training set before the first
    /// update, with fixed masking and negatives.
    pub initial_loss: LossSummary,
    /// The same measurement after the last epoch.
    pub final_loss: LossSummary,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Scores of the returned model; includes trainable parameters and
    /// timings.
    pub metrics: MetricsReport,
    pub total_params: usize,
    pub freeze: Option<FreezeReport>,
    pub backbone_checksum: String,
    pub adapter_checksum: Option<String>,
}

fn prepare(
    model: &Mf2Model,
    data: &Dataset,
    budgets: &CaptionBudgets,
) -> Result<Vec<PreparedCaptions>> {
    data.captions
        .iter()
        .map(|c| Ok(model.prepare_captions(c, budgets)?))
        .collect()
}

fn refs<'a>(
    data: &'a Dataset,
    prepared: &'a [PreparedCaptions],
    idx: &[usize],
) -> Vec<TrainRef<'a>> {
    idx.iter()
        .map(|&i| TrainRef {
            sample: &data.samples[i],
            captions: &prepared[i],
        })
        .collect()
}

/// Training objective over `data` in fixed batches, without updates.
pub fn measure_objective(
    model: &Mf2Model,
    data: &Dataset,
    prepared: &[PreparedCaptions],
    batch_size: usize,
    seed: u64,
) -> Result<LossSummary> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut sum = LossSummary::default();
    let mut n = 0;
    for (b, chunk) in idx.chunks(batch_size.max(1)).enumerate() {
        let mut g = Graph::new(&model.store);
        let step_seed = rng::hash64(seed, format!("objective:{b}").as_bytes());
        let out = model.forward_train(&mut g, &refs(data, prepared, chunk), step_seed)?;
        sum.add(&out.report);
        n += 1;
    }
    Ok(if n == 0 {
        sum
    } else {
        sum.scaled(1.0 / n as f64)
    })
}

/// Image-only evaluation with parameter count and inference timing filled
/// in.
pub fn evaluate_timed(
    model: &Mf2Model,
    data: &Dataset,
    batch_size: usize,
) -> Result<MetricsReport> {
    let start = Instant::now();
    let mut m = evaluate(model, &data.sample_refs(), batch_size)?;
    m.infer_time_per_epoch = start.elapsed().as_secs_f64();
    m.trainable_params = model.store.trainable_count();
    Ok(m)
}

/// Settings of one training phase.
#[derive(Clone, Debug)]
pub struct PhaseSpec<'a> {
    pub name: &'a str,
    pub task: Task,
    pub train: TrainConfig,
    pub budgets: CaptionBudgets,
    pub eval_batch_size: usize,
}

/// Trains `model` on `train`, keeping the best validation epoch when `val`
/// is given, and scores the result on `val` (or `train` without it).
///
/// # Errors
/// A non-finite loss stops the phase; the observer has already seen the
/// last good model.
pub fn fit(
    model: &mut Mf2Model,
    train: &Dataset,
    val: Option<&Dataset>,
    spec: &PhaseSpec<'_>,
    observer: &mut dyn Observer,
) -> Result<PhaseRecord> {
    let base_weights = model.config.loss;
    model.config.loss = spec.task.weights(base_weights);
    let result = fit_inner(model, train, val, spec, observer);
    model.config.loss = base_weights;
    result
}

fn fit_inner(
    model: &mut Mf2Model,
    train: &Dataset,
    val: Option<&Dataset>,
    spec: &PhaseSpec<'_>,
    observer: &mut dyn Observer,
) -> Result<PhaseRecord> {
    model.config.loss.validate()?;
    if train.is_empty() {
        return Err(Error::Model(mf2_core::model::ModelError::EmptyBatch));
    }
    let cfg = &spec.train;
    let bs = cfg.batch_size.max(1);
    let prepared = prepare(model, train, &spec.budgets)?;
    let probe_seed = rng::hash64(cfg.seed, b"objective");
    let initial_loss = measure_objective(model, train, &prepared, bs, probe_seed)?;

    let steps_per_epoch = train.len().div_ceil(bs);
    let mut trainer = Trainer::new(cfg.clone(), cfg.epochs * steps_per_epoch);
    let score = |m: &Mf2Model| -> Result<Option<f64>> {
        match val {
            Some(v) => Ok(Some(spec.task.score(&evaluate(
                m,
                &v.sample_refs(),
                spec.eval_batch_size,
            )?))),
            None => Ok(None),
        }
    };
    let mut best_score = score(model)?;
    let mut best_epoch = 0;
    let mut best_store = val.map(|_| model.store.clone());
    observer.best(spec.name, model)?;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut train_seconds = 0.0;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut sum = LossSummary::default();
        let batches = epoch_batches(train.len(), bs, cfg.seed, epoch);
        for idx in &batches {
            let report = trainer.step(model, &refs(train, &prepared, idx))?;
            sum.add(&report);
        }
        let seconds = start.elapsed().as_secs_f64();
        train_seconds += seconds;
        let s = score(model)?;
        let log = EpochLog {
            epoch,
            loss: sum.scaled(1.0 / batches.len() as f64),
            validation_score: s,
            seconds,
        };
        observer.epoch(spec.name, &log);
        history.push(log);
        let improved = match (s, best_score) {
            (Some(now), Some(best)) => now > best,
            _ => true,
        };
        if improved {
            best_score = s;
            best_epoch = epoch;
            if val.is_some() {
                best_store = Some(model.store.clone());
            }
            observer.best(spec.name, model)?;
        }
    }
    if let Some(store) = best_store.filter(|_| best_epoch < cfg.epochs) {
        model.store = store;
    }
    let final_loss = measure_objective(model, train, &prepared, bs, probe_seed)?;
    let mut metrics = evaluate_timed(model, val.unwrap_or(train), spec.eval_batch_size)?;
    metrics.train_time_per_epoch = if cfg.epochs == 0 {
        0.0
    } else {
        train_seconds / cfg.epochs as f64
    };
    Ok(PhaseRecord {
        name: spec.name.to_string(),
        task: spec.task,
        epochs: cfg.epochs,
        initial_loss,
        final_loss,
        history,
        best_epoch,
        metrics,
        total_params: model.store.total_count(),
        freeze: None,
        backbone_checksum: model.backbone_checksum(),
        adapter_checksum: model.dfn.as_ref().map(|_| model.adapter_checksum()),
    })
}

/// Builds a fresh model from a run configuration.
pub fn build_model(cfg: &RunConfig) -> Result<Mf2Model> {
    Ok(Mf2Model::new(
        cfg.model_config(),
        cfg.encoders.tokenizer()?,
        cfg.encoders.au_map()?,
    )?)
}

pub fn phase_spec<'a>(cfg: &RunConfig, name: &'a str, task: Task, finetune: bool) -> PhaseSpec<'a> {
    PhaseSpec {
        name,
        task,
        train: if finetune {
            cfg.finetune_config()
        } else {
            cfg.train_config()
        },
        budgets: cfg.annotate.budgets,
        eval_batch_size: cfg.eval.batch_size,
    }
}

/// Pretraining: every parameter trainable, alignment plus recognition
/// objectives.
pub fn pretrain(
    cfg: &RunConfig,
    model: &mut Mf2Model,
    task: Task,
    train: &Dataset,
    val: Option<&Dataset>,
    observer: &mut dyn Observer,
) -> Result<PhaseRecord> {
    model.unfreeze_all();
    fit(
        model,
        train,
        val,
        &phase_spec(cfg, "pretrain", task, false),
        observer,
    )
}

/// Attaches side adapters, freezes the backbone and trains the adapters
/// and fresh heads on `task`.
pub fn finetune_dfn(
    cfg: &RunConfig,
    dfn: &DfnConfig,
    model: &mut Mf2Model,
    task: Task,
    train: &Dataset,
    val: Option<&Dataset>,
    observer: &mut dyn Observer,
) -> Result<PhaseRecord> {
    model.attach_dfn(dfn)?;
    let freeze = model.freeze_backbone()?;
    let mut rec = fit(
        model,
        train,
        val,
        &phase_spec(cfg, "dfn_finetune", task, true),
        observer,
    )?;
    rec.freeze = Some(freeze);
    Ok(rec)
}

/// Fine-tunes every parameter without adapters.
pub fn finetune_full(
    cfg: &RunConfig,
    model: &mut Mf2Model,
    task: Task,
    train: &Dataset,
    val: Option<&Dataset>,
    observer: &mut dyn Observer,
) -> Result<PhaseRecord> {
    let freeze = model.unfreeze_all();
    let mut rec = fit(
        model,
        train,
        val,
        &phase_spec(cfg, "full_finetune", task, true),
        observer,
    )?;
    rec.freeze = Some(freeze);
    Ok(rec)
}
