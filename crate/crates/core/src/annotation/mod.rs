//! Caption dataset construction: prompts, clients, validation, curation.

pub mod curation;
pub mod mock;

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AuId, AuLabels, Emotion, Image, ManifestRecord, N_AUS};
use crate::encoders::Tokenizer;

pub use curation::{balance_classes, filter_samples, split_by_video, CurationError};
pub use mock::MockClient;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionType {
    Au,
    Emotion,
    KeyAu,
}

impl CaptionType {
    pub const ALL: [CaptionType; 3] = [CaptionType::Au, CaptionType::Emotion, CaptionType::KeyAu];

    pub fn as_str(self) -> &'static str {
        match self {
            CaptionType::Au => "au",
            CaptionType::Emotion => "emotion",
            CaptionType::KeyAu => "key_au",
        }
    }
}

impl fmt::Display for CaptionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CaptionType {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CaptionType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| PromptError::UnknownCaptionType(s.to_string()))
    }
}

/// Maximum caption length per type, in tokens including CLS.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionBudgets {
    pub au: usize,
    pub emotion: usize,
    pub key_au: usize,
}

impl Default for CaptionBudgets {
    fn default() -> Self {
        Self {
            au: 169,
            emotion: 61,
            key_au: 169,
        }
    }
}

impl CaptionBudgets {
    pub fn get(&self, t: CaptionType) -> usize {
        match t {
            CaptionType::Au => self.au,
            CaptionType::Emotion => self.emotion,
            CaptionType::KeyAu => self.key_au,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PromptError {
    MissingLabel {
        sample_id: String,
        caption_type: CaptionType,
    },
    UnknownCaptionType(String),
}

impl fmt::Display for PromptError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptError::MissingLabel {
                sample_id,
                caption_type,
            } => write!(
                f,
                "sample {sample_id} lacks the labels a {caption_type} caption needs"
            ),
            PromptError::UnknownCaptionType(t) => {
                write!(
                    f,
                    "unknown caption type {t:?} (expected au, emotion or key_au)"
                )
            }
        }
    }
}

impl core::error::Error for PromptError {}

/// The three instruction stages of one request plus the ground truth the
/// client is asked to verbalize.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub caption_type: CaptionType,
    pub initial_setup: String,
    pub output_format: String,
    pub output_signal: String,
    pub ground_truth_payload: String,
    /// Structured copy of the payload for clients that do not parse text.
    pub au_labels: Option<AuLabels>,
    pub emotion: Option<Emotion>,
}

impl PromptBundle {
    /// Hex SHA-256 of the type and all four texts.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for part in [
            self.caption_type.as_str(),
            &self.initial_setup,
            &self.output_format,
            &self.output_signal,
            &self.ground_truth_payload,
        ] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Full request text in stage order.
    pub fn render(&self) -> String {
        alloc::format!(
            "{}\n\n{}\n\n{}\n\n{}",
            self.initial_setup,
            self.output_format,
            self.ground_truth_payload,
            self.output_signal
        )
    }
}

fn au_payload(labels: &AuLabels) -> String {
    let items: Vec<String> = AuId::all()
        .map(|a| alloc::format!("{a}={}", labels.0[a.index()]))
        .collect();
    alloc::format!("Action units: {}", items.join(", "))
}

/// Instantiates the prompt stages for one sample.
///
/// # Errors
/// [`PromptError::MissingLabel`] when the sample lacks labels the type needs.
pub fn build_prompt(
    sample: &ManifestRecord,
    caption_type: CaptionType,
    budgets: &CaptionBudgets,
) -> Result<PromptBundle, PromptError> {
    let missing = || PromptError::MissingLabel {
        sample_id: sample.sample_id.clone(),
        caption_type,
    };
    let budget = budgets.get(caption_type);
    let (initial_setup, output_format, output_signal, ground_truth_payload, au_labels, emotion) =
        match caption_type {
            CaptionType::Au => {
                let labels = sample.au_labels.ok_or_else(missing)?;
                (
                    "You are an AU description expert. You receive a face image and its facial \
                     action unit annotation, and you describe the state of every annotated unit."
                        .to_string(),
                    "Write one sentence per action unit in the order AU1, AU2, AU4, AU6, AU7, AU10, \
                     AU12, AU15, AU23, AU24, AU25, AU26. Example: AU12 lip corner puller is active: \
                     lip corners pulled up."
                        .to_string(),
                    alloc::format!(
                        "Describe the action units of this face now. Keep the answer under {budget} tokens."
                    ),
                    au_payload(&labels),
                    Some(labels),
                    None,
                )
            }
            CaptionType::Emotion => {
                let emotion = sample.emotion.ok_or_else(missing)?;
                (
                    "You are an emotion description expert. You receive a face image and its \
                     emotion label, and you describe how that emotion shows on the face."
                        .to_string(),
                    "Write at most two short sentences. Example: The face shows Happiness. \
                     Visible cues: AU6, AU12 and AU25."
                        .to_string(),
                    alloc::format!(
                        "Describe the emotion of this face now. Keep the answer under {budget} tokens."
                    ),
                    alloc::format!("Emotion: {emotion}"),
                    sample.au_labels,
                    Some(emotion),
                )
            }
            CaptionType::KeyAu => {
                let labels = sample.au_labels.ok_or_else(missing)?;
                let emotion = sample.emotion.ok_or_else(missing)?;
                (
                    "You are an emotion description expert with working knowledge of facial action \
                     units. You receive a face image, its emotion label and its action unit annotation."
                        .to_string(),
                    "Write a single sentence. Example: For Happiness, the most influential action \
                     units are AU6 (cheek raiser) and AU12 (lip corner puller)."
                        .to_string(),
                    alloc::format!(
                        "Name the most influential action units for the labeled emotion, choosing only \
                         active units. Keep the answer under {budget} tokens."
                    ),
                    alloc::format!("Emotion: {emotion}\n{}", au_payload(&labels)),
                    Some(labels),
                    Some(emotion),
                )
            }
        };
    Ok(PromptBundle {
        caption_type,
        initial_setup,
        output_format,
        output_signal,
        ground_truth_payload,
        au_labels,
        emotion,
    })
}

/// One generated caption.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub sample_id: String,
    pub caption_type: CaptionType,
    pub text: String,
    /// Not stored on disk; recomputed with the tokenizer on load.
    #[serde(skip)]
    pub token_count: usize,
    pub prompt_hash: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    EmptyCaption,
    LengthExceeded { tokens: usize, budget: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyCaption => f.write_str("caption is empty"),
            Violation::LengthExceeded { tokens, budget } => {
                write!(f, "caption has {tokens} tokens, budget is {budget}")
            }
        }
    }
}

/// Rule violations of a caption; empty when it is usable.
pub fn validate_caption(
    record: &CaptionRecord,
    tokenizer: &Tokenizer,
    budgets: &CaptionBudgets,
) -> Vec<Violation> {
    let mut out = Vec::new();
    if record.text.trim().is_empty() {
        out.push(Violation::EmptyCaption);
        return out;
    }
    let tokens = tokenizer.token_count(&record.text);
    let budget = budgets.get(record.caption_type);
    if tokens > budget {
        out.push(Violation::LengthExceeded { tokens, budget });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClientError {
    /// The request never completed (network, HTTP status, bad payload).
    Transport(String),
    /// The client refused this prompt.
    Rejected(String),
}

impl fmt::Display for ClientError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClientError::Transport(m) => write!(f, "annotation transport error: {m}"),
            ClientError::Rejected(m) => write!(f, "annotation request rejected: {m}"),
        }
    }
}

impl core::error::Error for ClientError {}

/// A caption generator.
pub trait AnnotationClient {
    fn generate(&self, image: &Image, prompt: &PromptBundle) -> Result<String, ClientError>;
}

impl<C: AnnotationClient + ?Sized> AnnotationClient for &C {
    fn generate(&self, image: &Image, prompt: &PromptBundle) -> Result<String, ClientError> {
        (**self).generate(image, prompt)
    }
}

/// A caption that failed validation twice, or that the client rejected twice.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationFailure {
    pub sample_id: String,
    pub caption_type: CaptionType,
    pub reason: String,
}

impl fmt::Display for AnnotationFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "annotation failed for {} ({}): {}",
            self.sample_id, self.caption_type, self.reason
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AnnotationOutcome {
    pub records: Vec<CaptionRecord>,
    pub failures: Vec<AnnotationFailure>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AnnotateError {
    Prompt(PromptError),
    Client(ClientError),
}

impl fmt::Display for AnnotateError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnnotateError::Prompt(e) => e.fmt(f),
            AnnotateError::Client(e) => e.fmt(f),
        }
    }
}

impl core::error::Error for AnnotateError {}

impl From<PromptError> for AnnotateError {
    fn from(e: PromptError) -> Self {
        AnnotateError::Prompt(e)
    }
}

/// Requests one caption, retrying once on a rejection or a rule violation.
///
/// # Errors
/// Transport errors end the whole run and are returned as `Err`.
pub fn annotate_one<C: AnnotationClient + ?Sized>(
    client: &C,
    sample: &ManifestRecord,
    image: &Image,
    caption_type: CaptionType,
    tokenizer: &Tokenizer,
    budgets: &CaptionBudgets,
) -> Result<Result<CaptionRecord, AnnotationFailure>, AnnotateError> {
    let prompt = build_prompt(sample, caption_type, budgets)?;
    let prompt_hash = prompt.hash();
    let mut reason = String::new();
    for _ in 0..2 {
        match client.generate(image, &prompt) {
            Ok(text) => {
                let record = CaptionRecord {
                    sample_id: sample.sample_id.clone(),
                    caption_type,
                    token_count: tokenizer.token_count(&text),
                    text,
                    prompt_hash: prompt_hash.clone(),
                };
                let violations = validate_caption(&record, tokenizer, budgets);
                if violations.is_empty() {
                    return Ok(Ok(record));
                }
                let v: Vec<String> = violations.iter().map(ToString::to_string).collect();
                reason = v.join("; ");
            }
            Err(ClientError::Rejected(m)) => reason = m,
            Err(e @ ClientError::Transport(_)) => return Err(AnnotateError::Client(e)),
        }
    }
    Ok(Err(AnnotationFailure {
        sample_id: sample.sample_id.clone(),
        caption_type,
        reason,
    }))
}

/// Sequential annotation of every (sample, type) pair. Records and failures
/// come back ordered by sample id, then caption type.
pub fn annotate_dataset<C: AnnotationClient + ?Sized>(
    samples: &[ManifestRecord],
    client: &C,
    caption_types: &[CaptionType],
    tokenizer: &Tokenizer,
    budgets: &CaptionBudgets,
    mut image_for: impl FnMut(&ManifestRecord) -> Image,
) -> Result<AnnotationOutcome, AnnotateError> {
    let mut order: Vec<&ManifestRecord> = samples.iter().collect();
    order.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let mut types = caption_types.to_vec();
    types.sort();
    types.dedup();
    let mut out = AnnotationOutcome::default();
    for sample in order {
        let image = image_for(sample);
        for &t in &types {
            match annotate_one(client, sample, &image, t, tokenizer, budgets)? {
                Ok(r) => out.records.push(r),
                Err(f) => out.failures.push(f),
            }
        }
    }
    Ok(out)
}

/// Splits an AU caption into per-AU sentences: the first sentence starting
/// with each AU tag.
pub fn per_au_sentences(text: &str) -> [Option<String>; N_AUS] {
    let mut out: [Option<String>; N_AUS] = Default::default();
    for sentence in text.split('.') {
        let s = sentence.trim();
        let Some(first) = s.split(|c: char| !c.is_alphanumeric()).next() else {
            continue;
        };
        if let Ok(au) = first.parse::<AuId>() {
            if first.starts_with("AU") && out[au.index()].is_none() {
                out[au.index()] = Some(alloc::format!("{s}."));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixture::make_fixture_manifest;
    use alloc::vec;

    fn sample() -> ManifestRecord {
        make_fixture_manifest(1, 4, 0, 32)
            .unwrap()
            .into_samples()
            .remove(0)
    }

    #[test]
    fn emotion_prompt_assigns_the_expert_role() {
        let b = build_prompt(&sample(), CaptionType::Emotion, &CaptionBudgets::default()).unwrap();
        assert!(b.initial_setup.contains("emotion description expert"));
        let b = build_prompt(&sample(), CaptionType::Au, &CaptionBudgets::default()).unwrap();
        assert!(b.initial_setup.contains("AU description expert"));
    }

    #[test]
    fn key_au_prompt_carries_both_label_sets() {
        let s = sample();
        let b = build_prompt(&s, CaptionType::KeyAu, &CaptionBudgets::default()).unwrap();
        assert!(b.ground_truth_payload.contains(s.emotion.unwrap().name()));
        assert!(b.ground_truth_payload.contains("AU26="));
        assert!(b.output_signal.contains("most influential action units"));
    }

    #[test]
    fn unknown_caption_type_and_missing_labels() {
        assert_eq!(
            "style".parse::<CaptionType>(),
            Err(PromptError::UnknownCaptionType("style".into()))
        );
        let mut s = sample();
        s.au_labels = None;
        assert!(matches!(
            build_prompt(&s, CaptionType::KeyAu, &CaptionBudgets::default()),
            Err(PromptError::MissingLabel { .. })
        ));
    }

    fn record(t: CaptionType, text: &str) -> CaptionRecord {
        CaptionRecord {
            sample_id: "s".into(),
            caption_type: t,
            text: text.into(),
            token_count: 0,
            prompt_hash: String::new(),
        }
    }

    #[test]
    fn emotion_budget_boundary() {
        let tok = Tokenizer::builtin();
        let b = CaptionBudgets::default();
        let at = "anger ".repeat(60);
        assert_eq!(tok.token_count(&at), 61);
        assert!(validate_caption(&record(CaptionType::Emotion, &at), &tok, &b).is_empty());
        let over = "anger ".repeat(61);
        assert_eq!(
            validate_caption(&record(CaptionType::Emotion, &over), &tok, &b),
            vec![Violation::LengthExceeded {
                tokens: 62,
                budget: 61
            }]
        );
        assert_eq!(
            validate_caption(&record(CaptionType::Emotion, ""), &tok, &b),
            vec![Violation::EmptyCaption]
        );
    }

    struct Silent;
    impl AnnotationClient for Silent {
        fn generate(&self, _: &Image, _: &PromptBundle) -> Result<String, ClientError> {
            Ok(String::new())
        }
    }

    #[test]
    fn empty_client_output_fails_every_pair() {
        let m = make_fixture_manifest(1, 2, 0, 32).unwrap();
        let out = annotate_dataset(
            m.samples(),
            &Silent,
            &CaptionType::ALL,
            &Tokenizer::builtin(),
            &CaptionBudgets::default(),
            |_| Image::zeros(1, 1),
        )
        .unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.failures.len(), 6);
    }

    #[test]
    fn mock_annotation_is_reproducible_and_valid() {
        let m = make_fixture_manifest(1, 2, 0, 32).unwrap();
        let tok = Tokenizer::builtin();
        let b = CaptionBudgets::default();
        let run = || {
            annotate_dataset(
                m.samples(),
                &MockClient::new(4),
                &CaptionType::ALL,
                &tok,
                &b,
                |_| Image::zeros(1, 1),
            )
            .unwrap()
        };
        let a = run();
        assert_eq!(a.records.len(), 6);
        assert!(a.failures.is_empty());
        assert_eq!(a, run());
        for r in &a.records {
            assert!(validate_caption(r, &tok, &b).is_empty());
        }
    }

    #[test]
    fn au_caption_splits_into_twelve_sentences() {
        let labels = AuLabels::from_active(&[4, 25]);
        let parts = per_au_sentences(&mock::au_caption(&labels, 0));
        for (i, p) in parts.iter().enumerate() {
            let p = p.as_deref().unwrap();
            assert!(
                p.starts_with(&alloc::format!("{} ", AuId::from_index(i).unwrap())),
                "{p}"
            );
        }
    }
}
