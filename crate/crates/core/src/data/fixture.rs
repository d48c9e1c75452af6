//! Procedural stand-in for a labeled face-video corpus.
//!
//! Labels, landmarks and pixels are pure functions of `(seed, ids)`, so a
//! fixture can be regenerated anywhere without shipping image files. Images
//! carry label-dependent structure (an emotion-specific stripe pattern and a
//! blob at every active AU) on top of per-pixel noise, which makes the toy
//! recognition tasks learnable.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;

use rand::Rng;

use super::{AuId, AuLabels, DatasetManifest, Emotion, Image, Landmarks, ManifestRecord, Split};
use crate::encoders::regions::AuLandmarkMap;
use crate::rng;

/// Chance that a fixture AU label disagrees with the emotion prototype.
const AU_FLIP_PROB: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FixtureError {
    InvalidArgument(&'static str),
}

impl fmt::Display for FixtureError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FixtureError::InvalidArgument(what) => write!(f, "invalid fixture argument: {what}"),
        }
    }
}

impl core::error::Error for FixtureError {}

/// Canonical frontal 68-point layout scaled to `size` pixels.
pub fn canonical_landmarks(size: usize) -> Landmarks {
    let mut pts: Vec<[f64; 2]> = Vec::with_capacity(68);
    // jaw 0..16: lower half-ellipse from left temple through chin to right
    for i in 0..17 {
        let t = PI * i as f64 / 16.0;
        pts.push([0.5 - 0.4 * libm::cos(t), 0.35 + 0.6 * libm::sin(t)]);
    }
    // brows 17..21 and 22..26
    for side in [0.18, 0.57] {
        for i in 0..5 {
            let u = i as f64 / 4.0;
            pts.push([side + 0.25 * u, 0.28 - 0.04 * libm::sin(PI * u)]);
        }
    }
    // nose bridge 27..30
    for i in 0..4 {
        pts.push([0.5, 0.36 + 0.06 * i as f64]);
    }
    // nostrils 31..35
    for i in 0..5 {
        let u = i as f64 / 4.0;
        pts.push([0.42 + 0.16 * u, 0.6 + 0.02 * libm::sin(PI * u)]);
    }
    // eyes 36..41 and 42..47
    for cx in [0.32, 0.68] {
        for i in 0..6 {
            let t = PI * i as f64 / 3.0;
            pts.push([cx - 0.07 * libm::cos(t), 0.38 - 0.03 * libm::sin(t)]);
        }
    }
    // outer lip 48..59, starting at the left corner, across the top
    for i in 0..12 {
        let t = PI * i as f64 / 6.0;
        pts.push([0.5 - 0.15 * libm::cos(t), 0.76 - 0.06 * libm::sin(t)]);
    }
    // inner lip 60..67
    for i in 0..8 {
        let t = PI * i as f64 / 4.0;
        pts.push([0.5 - 0.1 * libm::cos(t), 0.76 - 0.025 * libm::sin(t)]);
    }
    let s = size as f64;
    let max = s - 1e-9;
    Landmarks(
        pts.into_iter()
            .map(|[x, y]| [(x * s).clamp(0.0, max), (y * s).clamp(0.0, max)])
            .collect(),
    )
}

/// Per-video integer translation of the canonical layout.
fn sq(x: f64) -> f64 {
    x * x
}

fn video_shift(seed: u64, video_id: &str, size: usize) -> (f64, f64) {
    let mut r = rng::stream(seed, &format!("video-shift:{video_id}"));
    let span = (size / 32).max(1) as i64;
    (
        r.gen_range(-span..=span) as f64,
        r.gen_range(-span..=span) as f64,
    )
}

/// Deterministic labeled manifest of `n_videos * frames_per_video` frames.
/// Image paths point at `images/<sample_id>.png`; render pixels with
/// [`render_image`].
pub fn make_fixture_manifest(
    n_videos: usize,
    frames_per_video: usize,
    seed: u64,
    image_size: usize,
) -> Result<DatasetManifest, FixtureError> {
    if n_videos == 0 {
        return Err(FixtureError::InvalidArgument("n_videos must be at least 1"));
    }
    if frames_per_video == 0 {
        return Err(FixtureError::InvalidArgument(
            "frames_per_video must be at least 1",
        ));
    }
    if image_size < 8 {
        return Err(FixtureError::InvalidArgument(
            "image_size must be at least 8",
        ));
    }
    let offset = rng::stream(seed, "emotion-offset").gen_range(0..8usize);
    let base = canonical_landmarks(image_size);
    let max = image_size as f64 - 1e-9;
    let mut samples = Vec::with_capacity(n_videos * frames_per_video);
    for v in 0..n_videos {
        let video_id = format!("video_{v:03}");
        let (dx, dy) = video_shift(seed, &video_id, image_size);
        let landmarks = Landmarks(
            base.translated(dx, dy)
                .0
                .into_iter()
                .map(|[x, y]| [x.clamp(0.0, max), y.clamp(0.0, max)])
                .collect(),
        );
        for f in 0..frames_per_video {
            let i = v * frames_per_video + f;
            let emotion = Emotion::ALL[(i + offset) % 8];
            let sample_id = format!("v{v:03}_f{f:04}");
            let mut r = rng::stream(seed, &format!("aus:{sample_id}"));
            let mut aus = AuLabels::from_active(emotion.prototype_aus());
            for bit in aus.0.iter_mut() {
                if r.gen_bool(AU_FLIP_PROB) {
                    *bit ^= 1;
                }
            }
            samples.push(ManifestRecord {
                image_path: format!("images/{sample_id}.png"),
                sample_id,
                video_id: video_id.clone(),
                frame_index: f as u64,
                landmarks: landmarks.clone(),
                au_labels: Some(aus),
                emotion: Some(emotion),
            });
        }
    }
    Ok(DatasetManifest::new(samples, Split::Unsplit).expect("fixture frames are unique"))
}

/// Pixels for a fixture record. Quantized to 8-bit levels so a PNG round
/// trip is lossless.
pub fn render_image(record: &ManifestRecord, seed: u64, image_size: usize) -> Image {
    let s = image_size;
    let sf = s as f64;
    let mut tone_rng = rng::stream(seed, &format!("video-tone:{}", record.video_id));
    let skin = [
        tone_rng.gen_range(0.55..0.75),
        tone_rng.gen_range(0.40..0.55),
        tone_rng.gen_range(0.30..0.40),
    ];
    let bg = [
        tone_rng.gen_range(0.05..0.25),
        tone_rng.gen_range(0.05..0.25),
        tone_rng.gen_range(0.05..0.25),
    ];
    let mut noise = rng::stream(seed, &format!("pixels:{}", record.sample_id));

    let pts = record.landmarks.points();
    let (mut min_x, mut max_x, mut min_y, mut max_y) = (sf, 0.0f64, sf, 0.0f64);
    for &[x, y] in pts {
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    }
    let (cx, cy) = ((min_x + max_x) / 2.0, (min_y + max_y) / 2.0);
    let (rx, ry) = (
        ((max_x - min_x) / 2.0).max(1.0) * 1.05,
        ((max_y - min_y) / 2.0).max(1.0) * 1.1,
    );

    let emotion_k = record.emotion.map(Emotion::index);
    let map = AuLandmarkMap::default();
    let blobs: Vec<[f64; 2]> = match record.au_labels {
        Some(l) => l
            .active()
            .filter_map(|a: AuId| map.anchor_pixel(a, &record.landmarks))
            .collect(),
        None => Vec::new(),
    };
    let sigma = (0.05 * sf).max(1.0);

    let mut img = Image::zeros(s, s);
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let e = sq((px - cx) / rx) + sq((py - cy) / ry);
            let inside = e <= 1.0;
            let mut rgb = if inside { skin } else { bg };
            if inside {
                if let Some(k) = emotion_k {
                    let freq = (k + 1) as f64;
                    rgb[1] += 0.12 * libm::sin(2.0 * PI * freq * py / sf + k as f64);
                    rgb[0] += 0.04 * (k % 4) as f64;
                }
            }
            for &[bx, by] in &blobs {
                let d2 = sq(px - bx) + sq(py - by);
                rgb[2] += 0.35 * libm::exp(-d2 / (2.0 * sigma * sigma));
            }
            for (c, v) in rgb.iter().enumerate() {
                let n: f64 = noise.gen_range(-0.03..0.03);
                let q = libm::round((v + n).clamp(0.0, 1.0) * 255.0) / 255.0;
                img.set(y, x, c, q);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_layout_is_valid() {
        for size in [32, 64, 224] {
            assert!(canonical_landmarks(size).is_valid(size));
        }
    }

    #[test]
    fn fixture_is_deterministic() {
        let a = make_fixture_manifest(1, 1, 0, 32).unwrap();
        let b = make_fixture_manifest(1, 1, 0, 32).unwrap();
        assert_eq!(a, b);
        let ia = render_image(&a.samples()[0], 0, 32);
        let ib = render_image(&b.samples()[0], 0, 32);
        assert_eq!(ia, ib);
    }

    #[test]
    fn eight_by_four_covers_every_emotion() {
        let m = make_fixture_manifest(8, 4, 7, 32).unwrap();
        assert_eq!(m.len(), 32);
        // enumerate generated labels
        for e in Emotion::ALL {
            let n = m.samples().iter().filter(|s| s.emotion == Some(e)).count();
            assert!(n > 0, "{e} missing");
        }
        assert!(m.samples().iter().all(|s| s.landmarks.is_valid(32)));
    }

    #[test]
    fn zero_sizes_are_rejected() {
        assert!(matches!(
            make_fixture_manifest(0, 4, 0, 32),
            Err(FixtureError::InvalidArgument(_))
        ));
        assert!(matches!(
            make_fixture_manifest(4, 0, 0, 32),
            Err(FixtureError::InvalidArgument(_))
        ));
    }

    #[test]
    fn rendered_pixels_are_8bit_levels() {
        let m = make_fixture_manifest(2, 2, 3, 32).unwrap();
        let img = render_image(&m.samples()[1], 3, 32);
        assert_eq!(Image::from_rgb8(32, 32, &img.to_rgb8()), img);
    }
}
