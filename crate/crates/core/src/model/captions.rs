use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Mf2Model, ModelError};
use crate::annotation::{mock, per_au_sentences, CaptionBudgets, CaptionRecord, CaptionType};
use crate::data::{AuId, FaceSample, N_AUS};
use crate::encoders::TokenizedText;

/// Caption texts of one sample. `au` holds one sentence per AU in table
/// order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCaptions {
    pub emotion: Option<String>,
    pub au: Vec<Option<String>>,
    pub key_au: Option<String>,
}

impl SampleCaptions {
    /// Collects one sample's records; the AU caption is split into its
    /// per-AU sentences.
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a CaptionRecord>) -> Self {
        let mut out = Self {
            au: alloc::vec![None; N_AUS],
            ..Self::default()
        };
        for r in records {
            match r.caption_type {
                CaptionType::Emotion => out.emotion = Some(r.text.clone()),
                CaptionType::KeyAu => out.key_au = Some(r.text.clone()),
                CaptionType::Au => out.au = per_au_sentences(&r.text).into_iter().collect(),
            }
        }
        out
    }

    /// Template captions for a labeled sample, as the mock client writes
    /// them.
    pub fn mock(sample: &FaceSample, seed: u64) -> Self {
        let labels = &sample.au_labels;
        Self {
            emotion: Some(mock::emotion_caption(sample.emotion, labels, seed)),
            au: per_au_sentences(&mock::au_caption(labels, seed))
                .into_iter()
                .collect(),
            key_au: Some(mock::key_au_caption(sample.emotion, labels)),
        }
    }
}

/// Token ids ready for the text encoders. Only the captions the model's
/// branches read are present.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreparedCaptions {
    pub emotion: Option<TokenizedText>,
    /// Empty when the model has no local branch, else one per AU.
    pub au: Vec<TokenizedText>,
}

pub(super) fn prepare(
    model: &Mf2Model,
    captions: &SampleCaptions,
    budgets: &CaptionBudgets,
) -> Result<PreparedCaptions, ModelError> {
    let max_len = model.config.encoder.max_text_len;
    let emotion = if model.emo.is_some() {
        let text = captions
            .emotion
            .as_deref()
            .ok_or(ModelError::MissingEmotionCaption)?;
        let (text, budget) = if model.config.use_key_au_captions {
            let key = captions
                .key_au
                .as_deref()
                .ok_or(ModelError::MissingKeyAuCaption)?;
            (format!("{text} {key}"), budgets.emotion + budgets.key_au)
        } else {
            (String::from(text), budgets.emotion)
        };
        Some(model.tokenizer.encode(&text, budget.min(max_len))?)
    } else {
        None
    };
    let au = if model.au.is_some() {
        AuId::all()
            .map(|a| {
                let text = captions
                    .au
                    .get(a.index())
                    .and_then(Option::as_deref)
                    .ok_or(ModelError::MissingCaption(a))?;
                Ok(model.tokenizer.encode(text, budgets.au.min(max_len))?)
            })
            .collect::<Result<Vec<_>, ModelError>>()?
    } else {
        Vec::new()
    };
    Ok(PreparedCaptions { emotion, au })
}
