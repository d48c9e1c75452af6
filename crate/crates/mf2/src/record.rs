//! Run records, content hashing and the human-readable result tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mf2_core::annotation::AnnotationFailure;
use mf2_core::data::{AuId, Emotion};
use mf2_core::dfn::FreezeReport;
use mf2_core::metrics::MetricsReport;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::{AblationRecord, PhaseRecord};

/// Everything one command produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    /// The resolved run configuration.
    pub config: Value,
    /// Hash of the command, the configuration and every input file.
    pub input_hash: String,
    /// Hash of this record with wall-clock fields zeroed; equal for
    /// repeated runs of the same inputs.
    pub content_hash: String,
    /// Scores of the command's final model.
    pub metrics: Option<MetricsReport>,
    pub phases: Vec<PhaseRecord>,
    pub ablations: Vec<AblationRecord>,
    /// Untrained-model scores, for scenarios that compare against one.
    pub baseline: Option<MetricsReport>,
    pub freeze: Option<FreezeReport>,
    /// Text-encoder invocations during evaluation.
    pub text_encoder_calls: Option<usize>,
    pub annotation: Option<AnnotationSummary>,
    /// Checkpoint file name inside the run directory.
    pub checkpoint: Option<String>,
    pub wall_seconds: f64,
}

/// Outcome of a captioning run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSummary {
    /// Where the caption records were written.
    pub captions: String,
    pub records: usize,
    pub failures: Vec<AnnotationFailure>,
}

const TIMING_KEYS: [&str; 5] = [
    "seconds",
    "train_time_per_epoch",
    "infer_time_per_epoch",
    "wall_seconds",
    "content_hash",
];

fn strip_timings(v: &mut Value) {
    match v {
        Value::Object(map) => {
            for (k, x) in map.iter_mut() {
                if TIMING_KEYS.contains(&k.as_str()) {
                    *x = Value::Null;
                } else {
                    strip_timings(x);
                }
            }
        }
        Value::Array(xs) => xs.iter_mut().for_each(strip_timings),
        _ => {}
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunRecord {
    pub fn compute_content_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("records serialize");
        strip_timings(&mut v);
        sha256_hex(v.to_string().as_bytes())
    }

    pub fn seal(mut self) -> Self {
        self.content_hash = self.compute_content_hash();
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("records serialize");
        fs::write(path, text + "\n").map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: e.line(),
            reason: e.to_string(),
        })
    }
}

/// Incremental hash over labeled byte strings.
#[derive(Clone, Default)]
pub struct InputHasher(Sha256);

impl InputHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, label: &str, bytes: &[u8]) -> &mut Self {
        for part in [label.as_bytes(), bytes] {
            self.0.update((part.len() as u64).to_le_bytes());
            self.0.update(part);
        }
        self
    }

    pub fn add_file(&mut self, path: &Path) -> Result<&mut Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        let label = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(self.add(&label, &bytes))
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.2}"))
}

fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| -> String {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = line(header);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&line(&rule));
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

/// Per-AU F1 (percent), AU columns in table order, then the average.
pub fn au_table(rows: &[(String, &MetricsReport)]) -> String {
    let mut header = vec!["Method".to_string()];
    header.extend(AuId::all().map(|a| a.to_string()));
    header.push("Avg".into());
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, m)| {
            let mut r = vec![name.clone()];
            r.extend(AuId::all().map(|a| pct(m.per_au_f1.get(&a.to_string()))));
            r.push(pct(Some(m.au_macro_f1)));
            r
        })
        .collect();
    table(&header, &body)
}

/// Per-emotion accuracy (percent) in class order, then the average over
/// classes present.
pub fn emotion_table(rows: &[(String, &MetricsReport)]) -> String {
    let mut header = vec!["Method".to_string()];
    header.extend(Emotion::ALL.iter().map(|e| e.name().to_string()));
    header.push("Avg".into());
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, m)| {
            let mut r = vec![name.clone()];
            r.extend(
                Emotion::ALL
                    .iter()
                    .map(|e| pct(m.per_emotion_acc.get(e.name()))),
            );
            r.push(pct(Some(m.emotion_macro_acc)));
            r
        })
        .collect();
    table(&header, &body)
}

/// Recognition scores, trainable parameters and per-epoch timings per
/// variant.
pub fn ablation_table(records: &[AblationRecord]) -> String {
    let header: Vec<String> = [
        "Variant",
        "AU F1",
        "Emo Acc",
        "TP",
        "TT (s/epoch)",
        "IT (s/epoch)",
    ]
    .map(String::from)
    .to_vec();
    let body: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            let m = &r.finetune.metrics;
            vec![
                r.variant.to_string(),
                format!("{:.2}", m.au_macro_f1),
                format!("{:.2}", m.emotion_macro_acc),
                m.trainable_params.to_string(),
                format!("{:.4}", m.train_time_per_epoch),
                format!("{:.4}", m.infer_time_per_epoch),
            ]
        })
        .collect();
    table(&header, &body)
}

/// Both recognition tables for a set of named results.
pub fn recognition_report(rows: &[(String, &MetricsReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "AU recognition, F1 (%)\n");
    out.push_str(&au_table(rows));
    let _ = writeln!(out, "\nEmotion recognition, accuracy (%)\n");
    out.push_str(&emotion_table(rows));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timing_fields_do_not_change_the_hash() {
        let a = RunRecord {
            command: "eval".into(),
            wall_seconds: 1.0,
            ..RunRecord::default()
        };
        let b = RunRecord {
            wall_seconds: 9.0,
            ..a.clone()
        };
        assert_eq!(a.compute_content_hash(), b.compute_content_hash());
        let c = RunRecord {
            command: "train".into(),
            ..a.clone()
        };
        assert_ne!(a.compute_content_hash(), c.compute_content_hash());
    }

    #[test]
    fn tables_have_reference_column_order() {
        let au = vec![vec![1u8; 12]];
        let m = MetricsReport::compute(&au, &au, &[Emotion::Fear], &[Emotion::Fear]).unwrap();
        let t = au_table(&[("x".into(), &m)]);
        let header: Vec<&str> = t
            .lines()
            .next()
            .unwrap()
            .split('|')
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .collect();
        assert_eq!(header[1], "AU1");
        assert_eq!(header[12], "AU26");
        assert_eq!(header.len(), 14);
        let e = emotion_table(&[("x".into(), &m)]);
        let header: Vec<&str> = e
            .lines()
            .next()
            .unwrap()
            .split('|')
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .collect();
        assert_eq!(
            &header[1..9],
            &[
                "Neutral",
                "Anger",
                "Disgust",
                "Fear",
                "Happiness",
                "Sadness",
                "Surprise",
                "Other"
            ]
        );
    }
}
