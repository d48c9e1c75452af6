//! Decoupled fine-tuning: gated bottleneck side adapters beside a frozen
//! backbone.
//!
//! Each pathway (visual and text, per branch) gets its own cells, so the
//! self-attention and feed-forward weights the backbone shares between the
//! two pathways are bypassed by pathway-specific trainable parameters.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::nn::{fan_in, Builder, Linear};
use crate::params::{Init, ParamId, ParamStore};

/// Name prefix of every parameter the fine-tuning network adds.
pub const PREFIX: &str = "dfn.";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    /// One cell per Q-former block per pathway.
    #[default]
    Blockwise,
    /// A stack of cells on each encoder's final CLS token.
    #[serde(alias = "cls")]
    ClsLastLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DfnConfig {
    /// Bottleneck width `r`.
    pub r: usize,
    pub gate: f64,
    pub activation: Activation,
    /// Cells per stack in [`Tap::ClsLastLayer`] mode.
    pub n_adapter_layers: usize,
    pub tap: Tap,
    /// Fresh task heads (true) or copies of the backbone heads (false).
    pub reinit_heads: bool,
    /// Expected model width; checked at attach time when set.
    pub dim: Option<usize>,
}

impl Default for DfnConfig {
    fn default() -> Self {
        Self {
            r: 2,
            gate: 0.1,
            activation: Activation::Relu,
            n_adapter_layers: 7,
            tap: Tap::Blockwise,
            reinit_heads: true,
            dim: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DfnError {
    AlreadyAttached,
    NotAttached,
    ConfigMismatch { model_dim: usize, config_dim: usize },
    DimMismatch { expected: usize, got: usize },
    BadConfig(&'static str),
}

impl fmt::Display for DfnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DfnError::AlreadyAttached => f.write_str("a fine-tuning network is already attached"),
            DfnError::NotAttached => f.write_str("no fine-tuning network is attached"),
            DfnError::ConfigMismatch {
                model_dim,
                config_dim,
            } => write!(
                f,
                "adapter width {config_dim} does not match model width {model_dim}"
            ),
            DfnError::DimMismatch { expected, got } => {
                write!(f, "adapter input has width {got}, expected {expected}")
            }
            DfnError::BadConfig(why) => write!(f, "invalid adapter config: {why}"),
        }
    }
}

impl core::error::Error for DfnError {}

impl DfnConfig {
    /// Bottleneck sized so that the adapter network of the full-scale
    /// model holds about 52.9M parameters.
    pub fn full_scale() -> Self {
        Self {
            r: 716,
            ..Self::default()
        }
    }

    pub fn validate(&self, model_dim: usize) -> Result<(), DfnError> {
        if let Some(d) = self.dim {
            if d != model_dim {
                return Err(DfnError::ConfigMismatch {
                    model_dim,
                    config_dim: d,
                });
            }
        }
        if self.r == 0 || self.r >= model_dim {
            return Err(DfnError::BadConfig("bottleneck must satisfy 0 < r < D"));
        }
        if !(self.gate > 0.0 && self.gate <= 1.0) {
            return Err(DfnError::BadConfig("gate must lie in (0, 1]"));
        }
        if self.n_adapter_layers == 0 {
            return Err(DfnError::BadConfig("n_adapter_layers must be at least 1"));
        }
        Ok(())
    }
}

/// `g · up(act(down(x)))`. The residual add happens where the cell is
/// attached.
#[derive(Clone, Debug)]
pub struct AdapterCell {
    pub down: Linear,
    pub up: Linear,
    pub activation: Activation,
    pub gate: f64,
    pub dim: usize,
}

impl AdapterCell {
    /// Down-projection small random, up-projection zero.
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, cfg: &DfnConfig) -> Self {
        Self {
            down: Linear::with_init(b, &format!("{name}.down"), dim, cfg.r, fan_in(dim), true),
            up: Linear::with_init(b, &format!("{name}.up"), cfg.r, dim, Init::Zeros, true),
            activation: cfg.activation,
            gate: cfg.gate,
            dim,
        }
    }

    /// # Errors
    /// [`DfnError::DimMismatch`] when `x` is not `D` wide.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var, DfnError> {
        let got = g.shape(x).1;
        if got != self.dim {
            return Err(DfnError::DimMismatch {
                expected: self.dim,
                got,
            });
        }
        Ok(self.apply(g, x))
    }

    /// [`AdapterCell::forward`] for callers that already checked widths.
    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.down.forward(g, x);
        let h = match self.activation {
            Activation::Relu => g.relu(h),
            Activation::Sigmoid => g.sigmoid(h),
        };
        let h = self.up.forward(g, h);
        g.scale(h, self.gate)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.down.param_ids();
        ids.extend(self.up.param_ids());
        ids
    }
}

/// Runs cells as a residual stack and returns the total change:
/// `h ← h + cell(h)` for each cell, result `h_final − x`.
pub fn stack_delta(g: &mut Graph<'_>, cells: &[AdapterCell], x: Var) -> Var {
    let mut h = x;
    for c in cells {
        let d = c.apply(g, h);
        h = g.add(h, d);
    }
    g.sub(h, x)
}

/// Borrowed per-block cells of one branch, visual and text pathway.
#[derive(Clone, Copy, Debug)]
pub struct PathAdapters<'a> {
    pub visual: &'a [AdapterCell],
    pub text: &'a [AdapterCell],
}

/// Cells of one branch.
#[derive(Clone, Debug)]
pub struct BranchAdapters {
    pub visual: Vec<AdapterCell>,
    pub text: Vec<AdapterCell>,
}

impl BranchAdapters {
    pub fn build(
        b: &mut Builder<'_>,
        branch: &str,
        dim: usize,
        n_cells: usize,
        cfg: &DfnConfig,
    ) -> Self {
        let mk = |b: &mut Builder<'_>, path: &str| {
            (0..n_cells)
                .map(|i| AdapterCell::new(b, &format!("{PREFIX}{branch}.{path}.cell{i}"), dim, cfg))
                .collect()
        };
        let visual = mk(b, "visual");
        let text = mk(b, "text");
        Self { visual, text }
    }

    pub fn paths(&self) -> PathAdapters<'_> {
        PathAdapters {
            visual: &self.visual,
            text: &self.text,
        }
    }

    pub fn cell_count(&self) -> usize {
        self.visual.len() + self.text.len()
    }

    pub fn visual_params(&self) -> Vec<ParamId> {
        self.visual
            .iter()
            .flat_map(AdapterCell::param_ids)
            .collect()
    }

    pub fn text_params(&self) -> Vec<ParamId> {
        self.text.iter().flat_map(AdapterCell::param_ids).collect()
    }
}

/// Parameter accounting after freezing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezeReport {
    pub frozen_param_count: usize,
    pub trainable_param_count: usize,
    pub trainable_fraction: f64,
    pub groups: Vec<GroupCount>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCount {
    pub group: String,
    pub params: usize,
    pub trainable: bool,
}

/// Marks every parameter outside the fine-tuning network frozen and every
/// one inside it trainable, then reports the counts.
pub fn freeze_all_but_prefix(store: &mut ParamStore, prefix: &str) -> FreezeReport {
    let ids: Vec<(ParamId, bool)> = store
        .iter()
        .map(|(id, p)| (id, p.name().starts_with(prefix)))
        .collect();
    for (id, keep) in ids {
        store.set_trainable(id, keep);
    }
    freeze_report(store)
}

/// Counts by group, where a group is the first two dotted name components.
pub fn freeze_report(store: &ParamStore) -> FreezeReport {
    let mut groups: BTreeMap<(String, bool), usize> = BTreeMap::new();
    for (_, p) in store.iter() {
        let group: Vec<&str> = p.name().splitn(3, '.').take(2).collect();
        *groups.entry((group.join("."), p.trainable())).or_default() += p.numel();
    }
    let total = store.total_count();
    let trainable = store.trainable_count();
    FreezeReport {
        frozen_param_count: total - trainable,
        trainable_param_count: trainable,
        trainable_fraction: if total == 0 {
            0.0
        } else {
            trainable as f64 / total as f64
        },
        groups: groups
            .into_iter()
            .map(|((group, trainable), params)| GroupCount {
                group,
                params,
                trainable,
            })
            .collect(),
    }
}
