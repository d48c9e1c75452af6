//! Single-file JSON checkpoints: the model configuration, tokenizer, AU
//! anchors and every parameter tensor by name.

use std::fs;
use std::path::Path;

use mf2_core::dfn::DfnConfig;
use mf2_core::encoders::{AuLandmarkMap, Tokenizer};
use mf2_core::model::{Mf2Config, Mf2Model};
use mf2_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "mf2-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub trainable: bool,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub model: Mf2Config,
    pub dfn: Option<DfnConfig>,
    pub vocabulary: Vec<String>,
    pub au_map: AuLandmarkMap,
    /// Echo of the run configuration that produced the weights.
    pub run_config: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

/// Names that did not line up between a checkpoint and a model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub loaded: usize,
    pub missing: Vec<String>,
    pub unexpected: Vec<String>,
    pub shape_mismatch: Vec<String>,
}

impl LoadReport {
    pub fn is_exact(&self) -> bool {
        self.missing.is_empty() && self.unexpected.is_empty() && self.shape_mismatch.is_empty()
    }
}

impl Checkpoint {
    pub fn from_model(model: &Mf2Model, run_config: serde_json::Value) -> Self {
        let tensors = model
            .store
            .iter()
            .map(|(_, p)| {
                let (r, c) = p.shape();
                NamedTensor {
                    name: p.name().to_string(),
                    shape: [r, c],
                    trainable: p.trainable(),
                    data: p.value().data().to_vec(),
                }
            })
            .collect();
        Self {
            format: FORMAT.into(),
            model: model.config.clone(),
            dfn: model.dfn.as_ref().map(|d| d.config.clone()),
            vocabulary: model.tokenizer.words().to_vec(),
            au_map: model.au_map.clone(),
            run_config,
            tensors,
        }
    }

    pub fn tokenizer(&self) -> Tokenizer {
        let mut t = Tokenizer::from_corpus([]);
        t.extend(self.vocabulary.iter().cloned());
        t
    }

    /// Copies tensors into `model` by name. Strict loading fails unless
    /// every name and shape lines up; otherwise matching tensors load and
    /// the rest are reported.
    pub fn load_into(
        &self,
        model: &mut Mf2Model,
        strict: bool,
    ) -> std::result::Result<LoadReport, String> {
        let mut report = LoadReport::default();
        let mut seen = std::collections::BTreeSet::new();
        let mut ready = Vec::new();
        for t in &self.tensors {
            let Some(id) = model.store.id(&t.name) else {
                report.unexpected.push(t.name.clone());
                continue;
            };
            seen.insert(id);
            if model.store.get(id).shape() != (t.shape[0], t.shape[1])
                || t.data.len() != t.shape[0] * t.shape[1]
            {
                report.shape_mismatch.push(t.name.clone());
            } else {
                ready.push((id, t));
            }
        }
        report.missing = model
            .store
            .iter()
            .filter(|(id, _)| !seen.contains(id))
            .map(|(_, p)| p.name().to_string())
            .collect();
        if strict && !report.is_exact() {
            let first = report
                .missing
                .iter()
                .chain(&report.unexpected)
                .chain(&report.shape_mismatch)
                .next()
                .map_or("-", String::as_str);
            return Err(format!(
                "strict load: {} missing, {} unexpected, {} with another shape (first: {first})",
                report.missing.len(),
                report.unexpected.len(),
                report.shape_mismatch.len(),
            ));
        }
        for (id, t) in ready {
            *model.store.value_mut(id) = Matrix::from_vec(t.shape[0], t.shape[1], t.data.clone());
            model.store.set_trainable(id, t.trainable);
            report.loaded += 1;
        }
        Ok(report)
    }

    /// Rebuilds the model the checkpoint was taken from.
    pub fn to_model(&self, strict: bool) -> std::result::Result<(Mf2Model, LoadReport), String> {
        let mut model = Mf2Model::new(self.model.clone(), self.tokenizer(), self.au_map.clone())
            .map_err(|e| e.to_string())?;
        if let Some(d) = &self.dfn {
            model.attach_dfn(d).map_err(|e| e.to_string())?;
        }
        let report = self.load_into(&mut model, strict)?;
        Ok((model, report))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        fs::write(path, text).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if ck.format != FORMAT {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("unsupported format {:?}", ck.format),
            });
        }
        Ok(ck)
    }

    /// Loads a checkpoint file and rebuilds its model.
    pub fn load_model(path: &Path, strict: bool) -> Result<(Self, Mf2Model, LoadReport)> {
        let ck = Self::load(path)?;
        let (model, report) = ck.to_model(strict).map_err(|reason| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })?;
        Ok((ck, model, report))
    }
}
