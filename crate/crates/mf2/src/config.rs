//! Run configuration: a TOML file plus `section.key=value` overrides.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use mf2_core::annotation::curation::{DEFAULT_TOLERANCE, DEFAULT_TRAIN_FRACTION};
use mf2_core::annotation::{CaptionBudgets, CaptionType};
use mf2_core::data::Split;
use mf2_core::dfn::DfnConfig;
use mf2_core::encoders::{AuLandmarkMap, EncoderConfig, Tokenizer};
use mf2_core::model::{Branches, LossWeights, Mf2Config};
use mf2_core::qformer::QFormerConfig;
use mf2_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: {reason}")]
    TypeError { key: String, reason: String },
    #[error("config file {} does not exist", .0.display())]
    MissingFile(PathBuf),
    #[error("{0}")]
    Syntax(String),
    #[error("override `{0}` is not of the form key=value")]
    BadOverride(String),
    #[error("{}: {reason}", path.display())]
    Asset { path: PathBuf, reason: String },
}

/// Input datasets and curation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    /// Caption records covering the training samples.
    pub captions: Option<PathBuf>,
    /// Allowed excess of each class over the smallest one when balancing.
    pub tolerance: f64,
    /// Train share of images in a video-disjoint split.
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_manifest: None,
            val_manifest: None,
            captions: None,
            tolerance: DEFAULT_TOLERANCE,
            train_fraction: DEFAULT_TRAIN_FRACTION,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientKind {
    #[default]
    Mock,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotateConfig {
    pub types: Vec<CaptionType>,
    pub client: ClientKind,
    /// Environment variable holding the remote endpoint URL.
    pub endpoint_env: String,
    /// Concurrent client requests.
    pub workers: usize,
    /// Token budgets per caption type (au 169, emotion 61, key_au 169).
    pub budgets: CaptionBudgets,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        Self {
            types: CaptionType::ALL.to_vec(),
            client: ClientKind::Mock,
            endpoint_env: "MF2_LLM_ENDPOINT".into(),
            workers: 4,
            budgets: CaptionBudgets::default(),
        }
    }
}

/// Encoder shapes plus optional vocabulary and AU-anchor files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodersConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub vit_depth: usize,
    pub text_depth: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// 0 uses the tokenizer's size.
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub region_k: usize,
    /// Word list, one per line; the built-in caption vocabulary when unset.
    pub vocab_path: Option<PathBuf>,
    /// JSON map from AU number to `{"landmarks": [..], "offset": [dx, dy]}`.
    pub au_map_path: Option<PathBuf>,
}

impl Default for EncodersConfig {
    fn default() -> Self {
        let e = Mf2Config::toy().encoder;
        Self {
            image_size: e.image_size,
            patch_size: e.patch_size,
            embed_dim: e.embed_dim,
            vit_depth: e.vit_depth,
            text_depth: e.text_depth,
            n_heads: e.n_heads,
            ffn_dim: e.ffn_dim,
            vocab_size: e.vocab_size,
            max_text_len: e.max_text_len,
            region_k: e.region_k,
            vocab_path: None,
            au_map_path: None,
        }
    }
}

impl EncodersConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            vit_depth: self.vit_depth,
            text_depth: self.text_depth,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            vocab_size: self.vocab_size,
            max_text_len: self.max_text_len,
            region_k: self.region_k,
        }
    }

    pub fn tokenizer(&self) -> Result<Tokenizer, ConfigError> {
        let Some(path) = &self.vocab_path else {
            return Ok(Tokenizer::builtin());
        };
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Asset {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let mut t = Tokenizer::from_corpus([]);
        t.extend(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from),
        );
        Ok(t)
    }

    pub fn au_map(&self) -> Result<AuLandmarkMap, ConfigError> {
        let Some(path) = &self.au_map_path else {
            return Ok(AuLandmarkMap::default());
        };
        let asset = |reason: String| ConfigError::Asset {
            path: path.clone(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|e| asset(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| asset(e.to_string()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub branches: Branches,
    /// Weights of the alignment and recognition losses, all 1 by default.
    pub loss: LossWeights,
    /// Append key-AU captions to the emotion captions.
    pub use_key_au_captions: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Unset scales to `min(2000, total_steps / 10)`.
    pub warmup_steps: Option<usize>,
    pub finetune_epochs: usize,
    /// Unset reuses `lr`.
    pub finetune_lr: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            warmup_steps: t.warmup_steps,
            finetune_epochs: t.epochs,
            finetune_lr: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    pub batch_size: usize,
    pub checkpoint: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Val,
            batch_size: 8,
            checkpoint: None,
        }
    }
}

/// Everything a command needs. Defaults are desk-scale model shapes with
/// the reference optimizer, temperature and gate settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Explicit output directory; unset derives one from the input hash
    /// under `MF2_RUN_ROOT`.
    pub run_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub annotate: AnnotateConfig,
    pub encoders: EncodersConfig,
    pub qformer_emo: QFormerConfig,
    pub qformer_au: QFormerConfig,
    pub model: ModelConfig,
    pub dfn: DfnConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let toy = Mf2Config::toy();
        Self {
            seed: 0,
            run_dir: None,
            data: DataConfig::default(),
            annotate: AnnotateConfig::default(),
            encoders: EncodersConfig::default(),
            qformer_emo: toy.qformer_emo,
            qformer_au: toy.qformer_au,
            model: ModelConfig::default(),
            dfn: DfnConfig::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> Mf2Config {
        Mf2Config {
            encoder: self.encoders.encoder(),
            qformer_emo: self.qformer_emo.clone(),
            qformer_au: self.qformer_au.clone(),
            branches: self.model.branches,
            loss: self.model.loss,
            use_key_au_captions: self.model.use_key_au_captions,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            warmup_steps: self.train.warmup_steps,
            seed: self.seed,
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.finetune_lr.unwrap_or(self.train.lr),
            epochs: self.train.finetune_epochs,
            ..self.train_config()
        }
    }

    /// Parses TOML text and applies overrides.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        from_table(table)
    }
}

/// Reads a config file, or defaults when `path` is `None`, then applies
/// `key=value` overrides in order.
///
/// # Errors
/// [`ConfigError::MissingFile`], [`ConfigError::UnknownKey`] and
/// [`ConfigError::TypeError`] name the offending path or key.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|_| ConfigError::MissingFile(p.to_path_buf()))?,
        None => String::new(),
    };
    RunConfig::from_toml(&text, overrides)
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key v was just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, raw: &str) -> Result<(), ConfigError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(raw.to_string()))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::BadOverride(raw.to_string()));
    }
    let mut cur = table;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => {
                return Err(ConfigError::TypeError {
                    key: parts[..=i].join("."),
                    reason: "is not a section".into(),
                })
            }
        };
    }
    cur.insert(
        parts[parts.len() - 1].to_string(),
        parse_value(value.trim()),
    );
    Ok(())
}

fn from_table(table: toml::Table) -> Result<RunConfig, ConfigError> {
    serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        let message = e.inner().to_string();
        if let Some(field) = unknown_field(&message) {
            let key = if path == "." {
                field.to_string()
            } else if path == field || path.ends_with(&format!(".{field}")) {
                path
            } else {
                format!("{path}.{field}")
            };
            ConfigError::UnknownKey(key)
        } else {
            ConfigError::TypeError {
                key: path,
                reason: message.lines().next().unwrap_or_default().to_string(),
            }
        }
    })
}

fn unknown_field(message: &str) -> Option<&str> {
    let rest = message.split("unknown field `").nth(1)?;
    rest.split('`').next()
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&toml::to_string(self).map_err(|_| fmt::Error)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_all_defaults() {
        let c = RunConfig::from_toml("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.train.weight_decay, 0.05);
        assert_eq!(c.qformer_emo.temperature, 0.07);
        assert_eq!(c.dfn.gate, 0.1);
    }

    #[test]
    fn display_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_string(), &[]).unwrap(), c);
    }
}
