use std::fmt;
use std::str::FromStr;

use mf2_core::metrics::MetricsReport;
use mf2_core::model::{Branches, Mf2Model};
use serde::{Deserialize, Serialize};

use super::{
    build_model, evaluate_timed, finetune_dfn, finetune_full, pretrain, Dataset, Observer,
    PhaseRecord, Task,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};

/// One row of the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Both branches, every parameter fine-tuned, no adapters.
    #[serde(rename = "full_finetune")]
    FullFinetune,
    /// Local branch only.
    #[serde(rename = "w/o_emo_vl")]
    WithoutEmoVl,
    /// Global branch only.
    #[serde(rename = "w/o_au_vl")]
    WithoutAuVl,
    /// Both branches, frozen backbone, side adapters.
    #[serde(rename = "dfn_finetune")]
    DfnFinetune,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::FullFinetune,
        Variant::WithoutEmoVl,
        Variant::WithoutAuVl,
        Variant::DfnFinetune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::FullFinetune => "full_finetune",
            Variant::WithoutEmoVl => "w/o_emo_vl",
            Variant::WithoutAuVl => "w/o_au_vl",
            Variant::DfnFinetune => "dfn_finetune",
        }
    }

    pub fn branches(self) -> Branches {
        match self {
            Variant::WithoutEmoVl => Branches::AuOnly,
            Variant::WithoutAuVl => Branches::EmotionOnly,
            Variant::FullFinetune | Variant::DfnFinetune => Branches::Both,
        }
    }

    /// Parses a comma list of variant names, or `all`.
    pub fn parse_list(s: &str) -> Result<Vec<Variant>, String> {
        if s.trim() == "all" {
            return Ok(Variant::ALL.to_vec());
        }
        let mut out: Vec<Variant> = s
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<Result<_, _>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.replace("w/o_", "wo_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name().replace("w/o_", "wo_") == key)
            .ok_or_else(|| {
                format!("unknown variant {s:?} (expected full_finetune, w/o_emo_vl, w/o_au_vl, dfn_finetune or all)")
            })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub variant: Variant,
    pub pretrain: PhaseRecord,
    /// The phase the variant is about; its metrics carry the trainable
    /// parameter count and per-epoch timings.
    pub finetune: PhaseRecord,
}

/// Runs each variant: pretraining of its branch layout for `train.epochs`,
/// then fine-tuning on both recognizers for `train.finetune_epochs`.
/// Variants with the same branch layout share one pretraining run.
///
/// # Errors
/// Failures are wrapped in [`Error::Variant`] naming the variant.
pub fn run_ablations(
    cfg: &RunConfig,
    variants: &[Variant],
    train: &Dataset,
    val: Option<&Dataset>,
    observer: &mut dyn Observer,
) -> Result<Vec<AblationRecord>> {
    let mut pretrained: Vec<(Branches, Mf2Model, PhaseRecord)> = Vec::new();
    let mut out = Vec::with_capacity(variants.len());
    for &v in variants {
        let tag = |source: Error| Error::Variant {
            variant: v.name().to_string(),
            source: Box::new(source),
        };
        let branches = v.branches();
        if !pretrained.iter().any(|(b, _, _)| *b == branches) {
            let mut c = cfg.clone();
            c.model.branches = branches;
            let mut model = build_model(&c).map_err(tag)?;
            let rec = pretrain(&c, &mut model, Task::Both, train, val, observer).map_err(tag)?;
            pretrained.push((branches, model, rec));
        }
        let (_, base, pre) = pretrained
            .iter()
            .find(|(b, _, _)| *b == branches)
            .expect("pretrained above");
        let mut model = base.clone();
        let finetune = match v {
            Variant::DfnFinetune => {
                finetune_dfn(cfg, &cfg.dfn, &mut model, Task::Both, train, val, observer)
            }
            _ => finetune_full(cfg, &mut model, Task::Both, train, val, observer),
        }
        .map_err(tag)?;
        out.push(AblationRecord {
            variant: v,
            pretrain: pre.clone(),
            finetune,
        });
    }
    Ok(out)
}

/// AU-objective pretraining followed by adapter fine-tuning for emotion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    /// The untrained model scored on the same data.
    pub baseline: MetricsReport,
    pub pretrain: PhaseRecord,
    pub finetune: PhaseRecord,
}

pub fn run_transition(
    cfg: &RunConfig,
    train: &Dataset,
    val: Option<&Dataset>,
    observer: &mut dyn Observer,
) -> Result<TransitionRecord> {
    run_transition_with_model(cfg, train, val, observer).map(|(r, _)| r)
}

/// [`run_transition`], also returning the fine-tuned model.
pub fn run_transition_with_model(
    cfg: &RunConfig,
    train: &Dataset,
    val: Option<&Dataset>,
    observer: &mut dyn Observer,
) -> Result<(TransitionRecord, Mf2Model)> {
    let mut model = build_model(cfg)?;
    let baseline = evaluate_timed(&model, val.unwrap_or(train), cfg.eval.batch_size)?;
    let pre = pretrain(cfg, &mut model, Task::Au, train, val, observer)?;
    let fine = finetune_dfn(
        cfg,
        &cfg.dfn,
        &mut model,
        Task::Emotion,
        train,
        val,
        observer,
    )?;
    let record = TransitionRecord {
        baseline,
        pretrain: pre,
        finetune: fine,
    };
    Ok((record, model))
}
