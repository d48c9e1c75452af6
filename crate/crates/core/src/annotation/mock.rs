//! Template captions filled from ground-truth labels.
//!
//! The mock client stands in for a hosted language model. Its output is a
//! pure function of the labels, the caption type and a seed; the seed only
//! picks between phrasing variants.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{AnnotationClient, CaptionType, ClientError, PromptBundle};
use crate::data::{AuId, AuLabels, Emotion, Image, N_AUS};
use crate::rng;

const AU_TAGS: [&str; N_AUS] = [
    "AU1", "AU2", "AU4", "AU6", "AU7", "AU10", "AU12", "AU15", "AU23", "AU24", "AU25", "AU26",
];

const AU_MOVEMENT: [&str; N_AUS] = [
    "inner brows lifted",
    "outer brows lifted",
    "brows drawn together and down",
    "cheeks raised toward the eyes",
    "eyelids tightened",
    "upper lip raised",
    "lip corners pulled up",
    "lip corners pulled down",
    "lips tightened",
    "lips pressed together",
    "lips parted",
    "jaw dropped open",
];

const ACTIVE_FORMS: [&str; 2] = [
    "{tag} {name} is active: {move}.",
    "{tag} {name} is present: {move}.",
];
const INACTIVE_FORMS: [&str; 2] = ["{tag} {name} is inactive.", "{tag} {name} is absent."];
const EMOTION_FORMS: [&str; 2] = [
    "The face shows {emotion}. Visible cues: {cues}.",
    "This expression reads as {emotion}. It involves {cues}.",
];
const EMOTION_CALM_FORMS: [&str; 2] = [
    "The face shows {emotion}. No action unit is active.",
    "This expression reads as {emotion}. The face is relaxed.",
];
const KEY_FORM: &str = "For {emotion}, the most influential action units are {keys}.";
const KEY_NONE_FORM: &str = "For {emotion}, no single action unit is decisive.";
const JOINERS: [&str; 2] = [",", "and"];

/// Every fixed string the templates can emit, for vocabulary building.
pub fn template_corpus() -> Vec<&'static str> {
    let mut out: Vec<&'static str> = Vec::new();
    out.extend(ACTIVE_FORMS);
    out.extend(INACTIVE_FORMS);
    out.extend(EMOTION_FORMS);
    out.extend(EMOTION_CALM_FORMS);
    out.extend([KEY_FORM, KEY_NONE_FORM]);
    out.extend(JOINERS);
    out.extend(AU_TAGS);
    out.extend(AU_MOVEMENT);
    out.extend(AuId::all().map(AuId::name));
    out.extend(Emotion::ALL.iter().map(|e| e.name()));
    out
}

fn variant(seed: u64, labels: &AuLabels, emotion: Option<Emotion>, salt: &str) -> usize {
    let mut bytes: Vec<u8> = labels.0.to_vec();
    bytes.push(emotion.map_or(255, |e| e.index() as u8));
    bytes.extend(salt.as_bytes());
    (rng::hash64(seed, &bytes) % 2) as usize
}

fn list(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// Twelve sentences, one per AU in table order.
pub fn au_caption(labels: &AuLabels, seed: u64) -> String {
    let sentences: Vec<String> = AuId::all()
        .map(|au| {
            let v = variant(seed, labels, None, au.name());
            let form = if labels.is_active(au) {
                ACTIVE_FORMS[v]
            } else {
                INACTIVE_FORMS[v]
            };
            form.replace("{tag}", AU_TAGS[au.index()])
                .replace("{name}", au.name())
                .replace("{move}", AU_MOVEMENT[au.index()])
        })
        .collect();
    sentences.join(" ")
}

pub fn emotion_caption(emotion: Emotion, labels: &AuLabels, seed: u64) -> String {
    let cues: Vec<String> = labels
        .active()
        .map(|a| String::from(AU_TAGS[a.index()]))
        .collect();
    let v = variant(seed, labels, Some(emotion), "emotion");
    let form = if cues.is_empty() {
        EMOTION_CALM_FORMS[v]
    } else {
        EMOTION_FORMS[v]
    };
    form.replace("{emotion}", emotion.name())
        .replace("{cues}", &list(&cues))
}

/// Active AUs that also belong to the emotion's prototype set.
pub fn key_aus(emotion: Emotion, labels: &AuLabels) -> Vec<AuId> {
    labels
        .active()
        .filter(|a| emotion.prototype_aus().contains(&a.number()))
        .collect()
}

pub fn key_au_caption(emotion: Emotion, labels: &AuLabels) -> String {
    let keys: Vec<String> = key_aus(emotion, labels)
        .into_iter()
        .map(|a| format!("{} ({})", AU_TAGS[a.index()], a.name()))
        .collect();
    if keys.is_empty() {
        KEY_NONE_FORM.replace("{emotion}", emotion.name())
    } else {
        KEY_FORM
            .replace("{emotion}", emotion.name())
            .replace("{keys}", &list(&keys))
    }
}

/// Deterministic template client.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MockClient {
    pub seed: u64,
}

impl MockClient {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl AnnotationClient for MockClient {
    fn generate(&self, _image: &Image, prompt: &PromptBundle) -> Result<String, ClientError> {
        let missing =
            || ClientError::Rejected(String::from("prompt lacks the labels this caption needs"));
        let labels = prompt.au_labels;
        let emotion = prompt.emotion;
        Ok(match prompt.caption_type {
            CaptionType::Au => au_caption(&labels.ok_or_else(missing)?, self.seed),
            CaptionType::Emotion => emotion_caption(
                emotion.ok_or_else(missing)?,
                &labels.unwrap_or_default(),
                self.seed,
            ),
            CaptionType::KeyAu => {
                key_au_caption(emotion.ok_or_else(missing)?, &labels.ok_or_else(missing)?)
            }
        })
    }
}
