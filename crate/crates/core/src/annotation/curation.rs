//! Filtering, class balancing and video-disjoint splitting.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::{index, SliceRandom};

use crate::data::{DatasetManifest, Emotion, ManifestRecord, Split};
use crate::rng;

pub const DEFAULT_TOLERANCE: f64 = 0.10;
/// Train share of images in the reference corpus split (31,320 of 34,696).
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.903;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CurationError {
    EmptyClass(Emotion),
    InsufficientVideos(usize),
    BadFraction,
}

impl fmt::Display for CurationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CurationError::EmptyClass(e) => write!(f, "emotion class {e} has no samples"),
            CurationError::InsufficientVideos(n) => {
                write!(
                    f,
                    "a video-disjoint split needs at least 2 videos, found {n}"
                )
            }
            CurationError::BadFraction => f.write_str("fraction must lie in (0, 1)"),
        }
    }
}

impl core::error::Error for CurationError {}

fn rebuild(samples: Vec<ManifestRecord>, split: Split) -> DatasetManifest {
    DatasetManifest::new(samples, split).expect("subset of a valid manifest has unique frames")
}

/// Keeps samples that carry both an AU annotation and an emotion label.
pub fn filter_samples(manifest: &DatasetManifest) -> DatasetManifest {
    let kept = manifest
        .samples()
        .iter()
        .filter(|s| s.is_fully_labeled())
        .cloned()
        .collect();
    rebuild(kept, manifest.split())
}

/// Subsamples every class to at most `floor(min * (1 + tolerance))`, where
/// `min` is the smallest class count. Unlabeled samples are dropped. Order
/// is preserved.
///
/// # Errors
/// [`CurationError::EmptyClass`] if some emotion has no samples.
pub fn balance_classes(
    manifest: &DatasetManifest,
    tolerance: f64,
    seed: u64,
) -> Result<DatasetManifest, CurationError> {
    if !(tolerance >= 0.0) {
        return Err(CurationError::BadFraction);
    }
    let mut by_class: BTreeMap<Emotion, Vec<usize>> =
        Emotion::ALL.iter().map(|&e| (e, Vec::new())).collect();
    for (i, s) in manifest.samples().iter().enumerate() {
        if let (Some(e), Some(_)) = (s.emotion, s.au_labels) {
            by_class.get_mut(&e).expect("all classes present").push(i);
        }
    }
    if let Some((&e, _)) = by_class.iter().find(|(_, v)| v.is_empty()) {
        return Err(CurationError::EmptyClass(e));
    }
    let min = by_class
        .values()
        .map(Vec::len)
        .min()
        .expect("eight classes");
    let cap = libm::floor(min as f64 * (1.0 + tolerance) + 1e-9) as usize;
    let mut keep = BTreeSet::new();
    for (e, idx) in &by_class {
        if idx.len() <= cap {
            keep.extend(idx.iter().copied());
        } else {
            let mut r = rng::stream(seed, &alloc::format!("balance:{}", e.name()));
            keep.extend(
                index::sample(&mut r, idx.len(), cap)
                    .into_iter()
                    .map(|k| idx[k]),
            );
        }
    }
    let samples = keep
        .into_iter()
        .map(|i| manifest.samples()[i].clone())
        .collect();
    Ok(rebuild(samples, manifest.split()))
}

/// Video-disjoint train/val split.
///
/// The train side gets `round(train_fraction * V)` videos (at least one per
/// side). Videos are visited largest first, ties in seeded order, and each
/// goes to the side whose image total is further below its target share.
///
/// # Errors
/// [`CurationError::InsufficientVideos`] with fewer than two videos.
pub fn split_by_video(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), CurationError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CurationError::BadFraction);
    }
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for s in manifest.samples() {
        *sizes.entry(s.video_id.as_str()).or_default() += 1;
    }
    let n_videos = sizes.len();
    if n_videos < 2 {
        return Err(CurationError::InsufficientVideos(n_videos));
    }
    let train_videos =
        (libm::round(train_fraction * n_videos as f64) as usize).clamp(1, n_videos - 1);
    let val_videos = n_videos - train_videos;

    let mut videos: Vec<(&str, usize)> = sizes.into_iter().collect();
    videos.shuffle(&mut rng::stream(seed, "split"));
    videos.sort_by(|a, b| b.1.cmp(&a.1));

    let total = manifest.len() as f64;
    let target_train = train_fraction * total;
    let target_val = total - target_train;
    let (mut n_train, mut n_val) = (0usize, 0usize);
    let (mut img_train, mut img_val) = (0usize, 0usize);
    let mut train_set: BTreeSet<String> = BTreeSet::new();
    for (video, size) in videos {
        let to_train = if n_train == train_videos {
            false
        } else if n_val == val_videos {
            true
        } else {
            let deficit_train = (target_train - img_train as f64) / target_train;
            let deficit_val = (target_val - img_val as f64) / target_val;
            deficit_train >= deficit_val
        };
        if to_train {
            n_train += 1;
            img_train += size;
            train_set.insert(video.into());
        } else {
            n_val += 1;
            img_val += size;
        }
    }
    let (train, val): (Vec<_>, Vec<_>) = manifest
        .samples()
        .iter()
        .cloned()
        .partition(|s| train_set.contains(&s.video_id));
    Ok((rebuild(train, Split::Train), rebuild(val, Split::Val)))
}
