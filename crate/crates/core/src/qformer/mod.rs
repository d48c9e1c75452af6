//! Q-former stack: learned queries, mode-masked joint self-attention with
//! text, cross-attention to visual tokens, and a feed-forward layer.
//!
//! Self-attention and feed-forward weights serve both the query rows and
//! the text rows of a block. Cross-attention is query-only. Blocks are
//! post-norm.

pub mod losses;

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{AttnMask, Graph, Var};
use crate::dfn::PathAdapters;
use crate::encoders::TextEmbedding;
use crate::nn::{Builder, FeedForward, LayerNorm, Linear, MultiHeadAttention, INIT_STD};
use crate::params::{Init, ParamId};

pub use losses::{
    itc_loss, itg_loss, itm_loss, sample_mask_positions, sample_negatives, Candidate, LossError,
    Temperature, TokenTargets,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItgStyle {
    /// Predict randomly masked tokens with bidirectional text attention.
    #[default]
    Masked,
    /// Predict each next token under a causal text mask.
    Causal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QFormerConfig {
    pub n_blocks: usize,
    pub n_queries: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub temperature: f64,
    pub learnable_temperature: bool,
    pub itg_style: ItgStyle,
    /// Share of text tokens selected for masked generation.
    pub mask_prob: f64,
    pub d_proj: usize,
    pub negatives_seed: u64,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            n_queries: 8,
            n_heads: 4,
            ffn_dim: 128,
            temperature: 0.07,
            learnable_temperature: false,
            itg_style: ItgStyle::Masked,
            mask_prob: 0.15,
            d_proj: 32,
            negatives_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Queries and text cannot see each other.
    Itc,
    /// Queries and text see each other fully.
    Itm,
    /// Text sees queries and text (causally under [`ItgStyle::Causal`]);
    /// queries do not see text.
    Itg,
    /// Queries only; no text rows exist.
    Infer,
}

impl FromStr for Mode {
    type Err = QFormerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "itc" => Ok(Mode::Itc),
            "itm" => Ok(Mode::Itm),
            "itg" => Ok(Mode::Itg),
            "infer" => Ok(Mode::Infer),
            other => Err(QFormerError::UnknownMode(other.into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum QFormerError {
    DimMismatch {
        expected: usize,
        got: usize,
    },
    UnknownMode(alloc::string::String),
    /// A text mode was requested without text, or text passed to `Infer`.
    TextRequired(Mode),
    Loss(LossError),
}

impl fmt::Display for QFormerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QFormerError::DimMismatch { expected, got } => {
                write!(
                    f,
                    "feature width {got} does not match model width {expected}"
                )
            }
            QFormerError::UnknownMode(m) => write!(f, "unknown mode {m:?}"),
            QFormerError::TextRequired(m) => write!(f, "mode {m:?} got the wrong text input"),
            QFormerError::Loss(e) => e.fmt(f),
        }
    }
}

impl core::error::Error for QFormerError {}

impl From<LossError> for QFormerError {
    fn from(e: LossError) -> Self {
        QFormerError::Loss(e)
    }
}

#[derive(Clone, Debug)]
pub struct QFormerBlock {
    pub self_attn: MultiHeadAttention,
    pub ln_self: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub ffn: FeedForward,
    pub ln_ffn: LayerNorm,
}

impl QFormerBlock {
    fn new(b: &mut Builder<'_>, name: &str, dim: usize, cfg: &QFormerConfig) -> Self {
        Self {
            self_attn: MultiHeadAttention::new(
                b,
                &format!("{name}.self_attn"),
                dim,
                dim,
                cfg.n_heads,
            ),
            ln_self: LayerNorm::new(b, &format!("{name}.ln_self"), dim),
            cross_attn: MultiHeadAttention::new(
                b,
                &format!("{name}.cross_attn"),
                dim,
                dim,
                cfg.n_heads,
            ),
            ln_cross: LayerNorm::new(b, &format!("{name}.ln_cross"), dim),
            ffn: FeedForward::new(b, &format!("{name}.ffn"), dim, cfg.ffn_dim),
            ln_ffn: LayerNorm::new(b, &format!("{name}.ln_ffn"), dim),
        }
    }

    fn shared_params(&self) -> Vec<ParamId> {
        let mut ids = self.self_attn.param_ids();
        ids.extend(self.ln_self.param_ids());
        ids.extend(self.ffn.param_ids());
        ids.extend(self.ln_ffn.param_ids());
        ids
    }

    /// Parameters the query rows pass through.
    pub fn query_path_params(&self) -> Vec<ParamId> {
        let mut ids = self.shared_params();
        ids.extend(self.cross_attn.param_ids());
        ids.extend(self.ln_cross.param_ids());
        ids
    }

    /// Parameters the text rows pass through.
    pub fn text_path_params(&self) -> Vec<ParamId> {
        self.shared_params()
    }

    fn forward(
        &self,
        g: &mut Graph<'_>,
        queries: Var,
        text: Option<Var>,
        visual: Var,
        mask: Option<Rc<AttnMask>>,
    ) -> (Var, Option<Var>) {
        let nq = g.shape(queries).0;
        let x = match text {
            Some(t) => g.concat_rows(&[queries, t]),
            None => queries,
        };
        let a = self.self_attn.forward(g, x, x, mask);
        let x = g.add(x, a);
        let x = self.ln_self.forward(g, x);
        let (q, t) = match text {
            Some(t) => {
                let lt = g.shape(t).0;
                (g.slice_rows(x, 0, nq), Some(g.slice_rows(x, nq, lt)))
            }
            None => (x, None),
        };
        let c = self.cross_attn.forward(g, q, visual, None);
        let q = g.add(q, c);
        let q = self.ln_cross.forward(g, q);
        let q = self.feed_forward(g, q);
        let t = t.map(|t| self.feed_forward(g, t));
        (q, t)
    }

    fn feed_forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let f = self.ffn.forward(g, x);
        let x = g.add(x, f);
        self.ln_ffn.forward(g, x)
    }
}

/// Outputs and per-block hidden states of one pass.
#[derive(Clone, Debug)]
pub struct QFormerState {
    /// The learned query tokens as used in this pass.
    pub query_tokens: Var,
    /// `[n_queries, D]` after the last block (plus side-adapter output).
    pub query_out: Var,
    /// `[L, D]`; absent in `Infer` mode.
    pub text_out: Option<Var>,
    /// Output of each block on the query path.
    pub query_states: Vec<Var>,
    /// Output of each block on the text path; empty in `Infer` mode.
    pub text_states: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct QFormer {
    pub config: QFormerConfig,
    pub dim: usize,
    pub queries: ParamId,
    pub blocks: Vec<QFormerBlock>,
    pub vision_proj: Linear,
    pub text_proj: Linear,
    pub itm_head: Linear,
    /// Output bias of the generation head; its weights are tied to the
    /// text encoder's token embedding.
    pub lm_bias: ParamId,
    pub temperature: Option<ParamId>,
}

impl QFormer {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        dim: usize,
        vocab_size: usize,
        cfg: &QFormerConfig,
    ) -> Self {
        assert!(cfg.temperature > 0.0, "temperature must be positive");
        Self {
            config: cfg.clone(),
            dim,
            queries: b.add(
                &format!("{name}.queries"),
                cfg.n_queries,
                dim,
                Init::Normal(INIT_STD),
            ),
            blocks: (0..cfg.n_blocks)
                .map(|i| QFormerBlock::new(b, &format!("{name}.block{i}"), dim, cfg))
                .collect(),
            vision_proj: Linear::new(b, &format!("{name}.vision_proj"), dim, cfg.d_proj),
            text_proj: Linear::new(b, &format!("{name}.text_proj"), dim, cfg.d_proj),
            itm_head: Linear::new(b, &format!("{name}.itm_head"), dim, 1),
            lm_bias: b.add(&format!("{name}.lm_bias"), 1, vocab_size, Init::Zeros),
            temperature: cfg.learnable_temperature.then(|| {
                b.add(
                    &format!("{name}.temperature"),
                    1,
                    1,
                    Init::Constant(cfg.temperature),
                )
            }),
        }
    }

    /// Self-attention mask over `[queries; text]` for a text mode.
    pub fn joint_mask(&self, mode: Mode, text_mask: &[u8]) -> AttnMask {
        let nq = self.config.n_queries;
        let n = nq + text_mask.len();
        let causal = self.config.itg_style == ItgStyle::Causal;
        AttnMask::from_fn(n, n, |i, j| {
            if j >= nq && text_mask[j - nq] == 0 {
                return false;
            }
            match (i < nq, j < nq) {
                (true, true) => true,
                (true, false) => mode == Mode::Itm,
                (false, true) => mode != Mode::Itc,
                (false, false) => !(mode == Mode::Itg && causal) || j <= i,
            }
        })
    }

    /// Runs the stack. `text` must be present exactly when `mode` is not
    /// [`Mode::Infer`].
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        visual: Var,
        text: Option<&TextEmbedding>,
        mode: Mode,
        adapters: Option<&PathAdapters<'_>>,
    ) -> Result<QFormerState, QFormerError> {
        let d = self.dim;
        let vd = g.shape(visual).1;
        if vd != d {
            return Err(QFormerError::DimMismatch {
                expected: d,
                got: vd,
            });
        }
        if (mode == Mode::Infer) != text.is_none() {
            return Err(QFormerError::TextRequired(mode));
        }
        if let Some(t) = text {
            let td = g.shape(t.tokens).1;
            if td != d {
                return Err(QFormerError::DimMismatch {
                    expected: d,
                    got: td,
                });
            }
        }
        let mask = text.map(|t| Rc::new(self.joint_mask(mode, &t.attention_mask)));
        let query_tokens = g.param(self.queries);
        let mut q = query_tokens;
        let mut t = text.map(|t| t.tokens);
        let mut side_q: Option<Var> = None;
        let mut side_t: Option<Var> = None;
        let mut query_states = Vec::with_capacity(self.blocks.len());
        let mut text_states = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            if let Some(ad) = adapters {
                let dq = ad.visual[i].apply(g, q);
                side_q = Some(match side_q {
                    Some(s) => g.add(s, dq),
                    None => dq,
                });
                if let Some(tv) = t {
                    let dt = ad.text[i].apply(g, tv);
                    side_t = Some(match side_t {
                        Some(s) => g.add(s, dt),
                        None => dt,
                    });
                }
            }
            let (nq, nt) = block.forward(g, q, t, visual, mask.clone());
            q = nq;
            t = nt;
            query_states.push(q);
            text_states.extend(t);
        }
        if let Some(s) = side_q {
            q = g.add(q, s);
        }
        if let (Some(s), Some(tv)) = (side_t, t) {
            t = Some(g.add(tv, s));
        }
        Ok(QFormerState {
            query_tokens,
            query_out: q,
            text_out: t,
            query_states,
            text_states,
        })
    }

    /// Mean over query rows, `[1, D]`.
    pub fn pool(&self, g: &mut Graph<'_>, query_out: Var) -> Var {
        g.mean_rows(query_out)
    }

    /// Unit-norm projection of pooled query features, `[1, d_proj]`.
    pub fn image_embed(&self, g: &mut Graph<'_>, pooled: Var) -> Var {
        let p = self.vision_proj.forward(g, pooled);
        g.l2_normalize_rows(p)
    }

    /// Unit-norm projection of a text CLS row, `[1, d_proj]`.
    pub fn text_embed(&self, g: &mut Graph<'_>, cls: Var) -> Var {
        let p = self.text_proj.forward(g, cls);
        g.l2_normalize_rows(p)
    }

    /// Matching logit from pooled query features of an `Itm` pass.
    pub fn itm_logit(&self, g: &mut Graph<'_>, pooled: Var) -> Var {
        self.itm_head.forward(g, pooled)
    }

    /// Vocabulary logits `[L, V]` for text rows, using `token_embed` as the
    /// output matrix.
    pub fn lm_logits(&self, g: &mut Graph<'_>, text_out: Var, token_embed: ParamId) -> Var {
        let e = g.param(token_embed);
        let z = g.matmul_t(text_out, e);
        let b = g.param(self.lm_bias);
        g.add_row(z, b)
    }

    pub fn temperature(&self, g: &mut Graph<'_>) -> Temperature {
        match self.temperature {
            Some(id) => Temperature::Learned(g.param(id)),
            None => Temperature::Fixed(self.config.temperature),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = alloc::vec![self.queries, self.lm_bias];
        for b in &self.blocks {
            ids.extend(b.query_path_params());
        }
        ids.extend(self.vision_proj.param_ids());
        ids.extend(self.text_proj.param_ids());
        ids.extend(self.itm_head.param_ids());
        ids.extend(self.temperature);
        ids
    }
}

#[cfg(test)]
mod tests;
