use std::collections::BTreeSet;

use mf2_core::annotation::curation::{
    balance_classes, filter_samples, split_by_video, CurationError,
};
use mf2_core::data::fixture::{canonical_landmarks, make_fixture_manifest};
use mf2_core::data::{AuLabels, DatasetManifest, Emotion, ManifestRecord, Split, N_EMOTIONS};
use proptest::prelude::*;

/// One entry per frame: (video, emotion index or 8 for none, labeled AUs).
fn manifest(frames: &[(usize, usize, bool)]) -> DatasetManifest {
    let landmarks = canonical_landmarks(32);
    let mut next = vec![0u64; 16];
    let samples = frames
        .iter()
        .enumerate()
        .map(|(i, &(v, e, aus))| {
            let f = next[v];
            next[v] += 1;
            // the first eight frames cover every class
            let (e, aus) = if i < N_EMOTIONS { (i, true) } else { (e, aus) };
            ManifestRecord {
                sample_id: format!("s{i:03}"),
                video_id: format!("v{v:02}"),
                frame_index: f,
                image_path: format!("images/s{i:03}.png"),
                landmarks: landmarks.clone(),
                au_labels: aus.then(|| AuLabels::from_active(&[1, 12])),
                emotion: Emotion::ALL.get(e).copied(),
            }
        })
        .collect();
    DatasetManifest::new(samples, Split::Unsplit).unwrap()
}

fn ids(m: &DatasetManifest) -> BTreeSet<&str> {
    m.samples().iter().map(|s| s.sample_id.as_str()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn curated_splits_are_balanced_and_video_disjoint(
        frames in proptest::collection::vec((0usize..16, 0usize..=8, proptest::bool::weighted(0.9)), 8..120),
        tolerance in prop_oneof![Just(0.0), Just(0.1), Just(0.25), 0.0f64..1.0],
        fraction in 0.2f64..0.95,
        seed in any::<u64>(),
    ) {
        let raw = manifest(&frames);
        let filtered = filter_samples(&raw);
        prop_assert!(filtered.samples().iter().all(ManifestRecord::is_fully_labeled));
        let balanced = balance_classes(&filtered, tolerance, seed).unwrap();
        let counts: Vec<usize> = balanced.class_counts().values().copied().collect();
        let (min, max) = (*counts.iter().min().unwrap(), *counts.iter().max().unwrap());
        prop_assert!(min >= 1);
        prop_assert!(max as f64 <= min as f64 * (1.0 + tolerance) + 1e-9);
        prop_assert!(ids(&balanced).is_subset(&ids(&filtered)));

        match split_by_video(&balanced, fraction, seed) {
            Ok((train, val)) => {
                prop_assert!(!train.is_empty() && !val.is_empty());
                prop_assert!(train.video_ids().is_disjoint(&val.video_ids()));
                prop_assert_eq!(train.len() + val.len(), balanced.len());
                let mut all = ids(&train);
                all.extend(ids(&val));
                prop_assert_eq!(all, ids(&balanced));
                prop_assert_eq!(train.split(), Split::Train);
                prop_assert_eq!(val.split(), Split::Val);
            }
            Err(e) => {
                prop_assert_eq!(e, CurationError::InsufficientVideos(balanced.video_ids().len()));
            }
        }
    }
}

#[test]
fn curation_is_deterministic_per_seed() {
    let m = make_fixture_manifest(10, 3, 4, 32).unwrap();
    let a = balance_classes(&m, 0.1, 7).unwrap();
    assert_eq!(a, balance_classes(&m, 0.1, 7).unwrap());
    assert_eq!(
        split_by_video(&a, 0.8, 7).unwrap(),
        split_by_video(&a, 0.8, 7).unwrap()
    );
}

#[test]
fn missing_class_and_bad_fraction_are_errors() {
    let only_first = manifest(&[(0, 0, true); 8])
        .samples()
        .iter()
        .filter(|s| s.emotion != Some(Emotion::ALL[7]))
        .cloned()
        .collect();
    let m = DatasetManifest::new(only_first, Split::Unsplit).unwrap();
    assert_eq!(
        balance_classes(&m, 0.1, 0),
        Err(CurationError::EmptyClass(Emotion::ALL[7]))
    );
    assert_eq!(split_by_video(&m, 1.0, 0), Err(CurationError::BadFraction));
    assert_eq!(
        split_by_video(&m, 0.5, 0),
        Err(CurationError::InsufficientVideos(1))
    );
}
