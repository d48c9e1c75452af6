//! Domain types shared by every stage: samples, manifests, label tables.

pub mod fixture;
pub mod image;
pub mod labels;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

pub use image::Image;
pub use labels::{AuId, AuLabels, Emotion, LabelError, N_AUS, N_EMOTIONS};

pub const N_LANDMARKS: usize = 68;

/// 68 `(x, y)` points in pixel coordinates, iBUG ordering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Landmarks(pub Vec<[f64; 2]>);

impl Landmarks {
    pub fn points(&self) -> &[[f64; 2]] {
        &self.0
    }

    /// True when there are 68 points, all inside `[0, image_size)`.
    pub fn is_valid(&self, image_size: usize) -> bool {
        let s = image_size as f64;
        self.0.len() == N_LANDMARKS
            && self
                .0
                .iter()
                .all(|&[x, y]| (0.0..s).contains(&x) && (0.0..s).contains(&y))
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self(self.0.iter().map(|&[x, y]| [x + dx, y + dy]).collect())
    }
}

/// One fully labeled face image, pixels in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceSample {
    pub sample_id: String,
    pub video_id: String,
    pub frame_index: u64,
    pub image: Image,
    pub landmarks: Landmarks,
    pub au_labels: AuLabels,
    pub emotion: Emotion,
}

/// One manifest line. Pixels are referenced by path; labels may be absent
/// before filtering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub sample_id: String,
    pub video_id: String,
    pub frame_index: u64,
    pub image_path: String,
    pub landmarks: Landmarks,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub au_labels: Option<AuLabels>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion: Option<Emotion>,
}

impl ManifestRecord {
    pub fn is_fully_labeled(&self) -> bool {
        self.au_labels.is_some() && self.emotion.is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    #[default]
    Unsplit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    samples: Vec<ManifestRecord>,
    split: Split,
    class_counts: BTreeMap<Emotion, usize>,
    au_counts: BTreeMap<AuId, usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ManifestError {
    /// `(video_id, frame_index)` appears twice.
    DuplicateFrame { video_id: String, frame_index: u64 },
}

impl fmt::Display for ManifestError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ManifestError::DuplicateFrame {
                video_id,
                frame_index,
            } => write!(f, "duplicate frame {frame_index} of video {video_id}"),
        }
    }
}

impl core::error::Error for ManifestError {}

impl DatasetManifest {
    /// Builds a manifest, recomputing counts and rejecting duplicate frames.
    pub fn new(samples: Vec<ManifestRecord>, split: Split) -> Result<Self, ManifestError> {
        let mut seen = BTreeSet::new();
        for s in &samples {
            if !seen.insert((s.video_id.as_str(), s.frame_index)) {
                return Err(ManifestError::DuplicateFrame {
                    video_id: s.video_id.clone(),
                    frame_index: s.frame_index,
                });
            }
        }
        let (class_counts, au_counts) = tally(&samples);
        Ok(Self {
            samples,
            split,
            class_counts,
            au_counts,
        })
    }

    pub fn empty(split: Split) -> Self {
        Self::new(Vec::new(), split).expect("empty manifest has no duplicates")
    }

    pub fn samples(&self) -> &[ManifestRecord] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<ManifestRecord> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Count per emotion; every class is present, possibly with 0.
    pub fn class_counts(&self) -> &BTreeMap<Emotion, usize> {
        &self.class_counts
    }

    /// Number of samples with each AU active; every AU present.
    pub fn au_counts(&self) -> &BTreeMap<AuId, usize> {
        &self.au_counts
    }

    pub fn video_ids(&self) -> BTreeSet<&str> {
        self.samples.iter().map(|s| s.video_id.as_str()).collect()
    }
}

fn tally(samples: &[ManifestRecord]) -> (BTreeMap<Emotion, usize>, BTreeMap<AuId, usize>) {
    let mut classes: BTreeMap<Emotion, usize> = Emotion::ALL.iter().map(|&e| (e, 0)).collect();
    let mut aus: BTreeMap<AuId, usize> = AuId::all().map(|a| (a, 0)).collect();
    for s in samples {
        if let Some(e) = s.emotion {
            *classes.entry(e).or_default() += 1;
        }
        if let Some(l) = s.au_labels {
            for a in l.active() {
                *aus.entry(a).or_default() += 1;
            }
        }
    }
    (classes, aus)
}
