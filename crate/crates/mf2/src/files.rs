//! On-disk formats: JSON Lines manifests and caption files, PNG images.
//!
//! Every JSON Lines file is written with sorted keys, one record per line,
//! so fixtures stay diffable and round trips are byte-stable.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mf2_core::annotation::{CaptionRecord, CaptionType};
use mf2_core::data::fixture::{make_fixture_manifest, render_image};
use mf2_core::data::{
    DatasetManifest, Emotion, FaceSample, Image, ManifestRecord, Split, N_AUS, N_LANDMARKS,
};
use mf2_core::encoders::Tokenizer;
use mf2_core::model::{labeled_sample, SampleCaptions};
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

/// A manifest plus the directory its relative image paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestFile {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
}

impl ManifestFile {
    pub fn image_path(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.image_path)
    }

    /// Reads every image and pairs it with its labels.
    ///
    /// # Errors
    /// Unlabeled records and unreadable images.
    pub fn load_samples(&self) -> Result<Vec<FaceSample>> {
        self.manifest
            .samples()
            .iter()
            .map(|r| Ok(labeled_sample(r, read_png(&self.image_path(r))?)?))
            .collect()
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn sorted_line<T: Serialize>(value: &T) -> String {
    // serde_json's default map is a BTreeMap, so keys come out sorted
    let v = serde_json::to_value(value).expect("records serialize to JSON");
    serde_json::to_string(&v).expect("JSON values serialize")
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(path, out).map_err(Error::io(path))
}

fn check_record(value: &Value, path: &Path, line: usize) -> Result<()> {
    let malformed = |reason: String| Error::MalformedRecord {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("expected a JSON object".into()))?;
    if let Some(e) = obj.get("emotion") {
        let name = e
            .as_str()
            .ok_or_else(|| malformed("emotion must be a string".into()))?;
        if !Emotion::ALL.iter().any(|c| c.name() == name) {
            return Err(Error::UnknownLabel {
                path: path.to_path_buf(),
                line,
                label: name.to_string(),
            });
        }
    }
    if let Some(a) = obj.get("au_labels") {
        let a = a
            .as_array()
            .ok_or_else(|| malformed("au_labels must be an array".into()))?;
        if a.len() != N_AUS {
            return Err(malformed(format!(
                "au_labels has {} entries, expected {N_AUS}",
                a.len()
            )));
        }
        if let Some(bad) = a.iter().find(|v| !matches!(v.as_u64(), Some(0 | 1))) {
            return Err(malformed(format!("au_labels entry {bad} is not 0 or 1")));
        }
    }
    if let Some(l) = obj.get("landmarks").and_then(Value::as_array) {
        if l.len() != N_LANDMARKS {
            return Err(malformed(format!(
                "{} landmarks, expected {N_LANDMARKS}",
                l.len()
            )));
        }
    }
    Ok(())
}

/// Reads a JSON Lines manifest. Counts are recomputed; blank lines are
/// skipped.
///
/// # Errors
/// [`Error::MalformedRecord`] and [`Error::UnknownLabel`] carry 1-based
/// line numbers; duplicate `(video_id, frame_index)` keys are rejected.
pub fn load_manifest(path: &Path) -> Result<ManifestFile> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut samples = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line = i + 1;
        let malformed = |reason: String| Error::MalformedRecord {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let value: Value = serde_json::from_str(raw).map_err(|e| malformed(e.to_string()))?;
        check_record(&value, path, line)?;
        let record: ManifestRecord =
            serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        samples.push(record);
    }
    let manifest =
        DatasetManifest::new(samples, Split::Unsplit).map_err(|source| Error::Manifest {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(ManifestFile {
        manifest,
        root: parent_dir(path),
    })
}

/// Writes `manifest` to `path`, rewriting image paths so they resolve from
/// the new location.
pub fn save_manifest(
    path: &Path,
    manifest: &DatasetManifest,
    image_root: &Path,
) -> Result<ManifestFile> {
    let out_root = parent_dir(path);
    let rebase = |p: &str| -> String {
        if same_dir(image_root, &out_root) {
            return p.to_string();
        }
        let abs = absolute(&image_root.join(p));
        pathdiff::diff_paths(&abs, absolute(&out_root))
            .unwrap_or(abs)
            .to_string_lossy()
            .replace('\\', "/")
    };
    let records: Vec<ManifestRecord> = manifest
        .samples()
        .iter()
        .map(|r| ManifestRecord {
            image_path: rebase(&r.image_path),
            ..r.clone()
        })
        .collect();
    write_lines(path, records.iter().map(sorted_line))?;
    Ok(ManifestFile {
        manifest: DatasetManifest::new(records, manifest.split()).expect("same keys as the input"),
        root: out_root,
    })
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => absolute(a) == absolute(b),
    }
}

pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    Ok(Image::from_rgb8(
        rgb.height() as usize,
        rgb.width() as usize,
        rgb.as_raw(),
    ))
}

pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let buf =
        image::RgbImage::from_raw(image.width() as u32, image.height() as u32, image.to_rgb8())
            .expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Generates a fixture dataset under `dir`: `manifest.jsonl` plus one PNG
/// per sample in `images/`.
pub fn write_fixture(
    dir: &Path,
    n_videos: usize,
    frames_per_video: usize,
    seed: u64,
    image_size: usize,
) -> Result<ManifestFile> {
    let manifest = make_fixture_manifest(n_videos, frames_per_video, seed, image_size)?;
    for r in manifest.samples() {
        write_png(&dir.join(&r.image_path), &render_image(r, seed, image_size))?;
    }
    save_manifest(&dir.join("manifest.jsonl"), &manifest, dir)
}

#[derive(Serialize, serde::Deserialize)]
struct CaptionLine {
    sample_id: String,
    caption_type: CaptionType,
    text: String,
    prompt_hash: String,
}

pub fn save_captions(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    write_lines(
        path,
        records.iter().map(|r| {
            sorted_line(&CaptionLine {
                sample_id: r.sample_id.clone(),
                caption_type: r.caption_type,
                text: r.text.clone(),
                prompt_hash: r.prompt_hash.clone(),
            })
        }),
    )
}

/// Reads caption records, recomputing token counts with `tokenizer`.
pub fn load_captions(path: &Path, tokenizer: &Tokenizer) -> Result<Vec<CaptionRecord>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let l: CaptionLine = serde_json::from_str(raw).map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(CaptionRecord {
            token_count: tokenizer.token_count(&l.text),
            sample_id: l.sample_id,
            caption_type: l.caption_type,
            text: l.text,
            prompt_hash: l.prompt_hash,
        });
    }
    Ok(out)
}

/// Groups caption records by sample.
pub fn index_captions(records: &[CaptionRecord]) -> BTreeMap<String, SampleCaptions> {
    let mut by_sample: BTreeMap<&str, Vec<&CaptionRecord>> = BTreeMap::new();
    for r in records {
        by_sample.entry(&r.sample_id).or_default().push(r);
    }
    by_sample
        .into_iter()
        .map(|(id, rs)| (id.to_string(), SampleCaptions::from_records(rs)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorted_line_orders_keys() {
        let line = sorted_line(&CaptionLine {
            sample_id: "s".into(),
            caption_type: CaptionType::KeyAu,
            text: "t".into(),
            prompt_hash: "h".into(),
        });
        assert_eq!(
            line,
            r#"{"caption_type":"key_au","prompt_hash":"h","sample_id":"s","text":"t"}"#
        );
    }
}
