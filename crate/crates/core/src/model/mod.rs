//! The two-branch recognizer.
//!
//! The global branch aligns whole-face tokens with emotion captions. The
//! local branch aligns a window of patch tokens around each AU with that
//! AU's caption, running all twelve windows through one Q-former. Linear
//! heads read pooled query features: one 8-way emotion probe and twelve
//! per-AU binary probes.

mod captions;
#[cfg(test)]
mod tests;

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{AuId, FaceSample, Image, Landmarks, N_AUS, N_EMOTIONS};
use crate::dfn::{
    self, stack_delta, BranchAdapters, DfnConfig, DfnError, FreezeReport, PathAdapters, Tap,
};
use crate::encoders::tokenizer::MASK;
use crate::encoders::{
    extract_au_regions, AuLandmarkMap, EncoderConfig, EncoderError, ImageEncoder, TextEmbedding,
    TextEncoder, TextEncoding, TokenizedText, Tokenizer, VisualEncoder,
};
use crate::nn::{Builder, Linear};
use crate::params::ParamStore;
use crate::qformer::{
    itc_loss, itg_loss, itm_loss, sample_mask_positions, sample_negatives, ItgStyle, LossError,
    Mode, QFormer, QFormerConfig, QFormerError, TokenTargets,
};
use crate::rng;
use crate::tensor::Matrix;

pub use captions::{PreparedCaptions, SampleCaptions};

/// Which alignment branches exist.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branches {
    #[default]
    Both,
    /// Local branch only; its mean per-AU feature also feeds the emotion
    /// head.
    AuOnly,
    /// Global branch only; its pooled feature feeds every AU head.
    EmotionOnly,
}

impl Branches {
    pub fn has_emotion(self) -> bool {
        self != Branches::AuOnly
    }

    pub fn has_au(self) -> bool {
        self != Branches::EmotionOnly
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub itc: f64,
    pub itm: f64,
    pub itg: f64,
    pub ce_au: f64,
    pub ce_emo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            itc: 1.0,
            itm: 1.0,
            itg: 1.0,
            ce_au: 1.0,
            ce_emo: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ModelError> {
        let w = [self.itc, self.itm, self.itg, self.ce_au, self.ce_emo];
        if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(ModelError::BadWeights(
                "loss weights must be finite and non-negative",
            ));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(ModelError::BadWeights(
                "at least one loss weight must be nonzero",
            ));
        }
        Ok(())
    }

    fn aligns(&self) -> bool {
        self.itc > 0.0 || self.itm > 0.0 || self.itg > 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mf2Config {
    pub encoder: EncoderConfig,
    pub qformer_emo: QFormerConfig,
    pub qformer_au: QFormerConfig,
    pub branches: Branches,
    pub loss: LossWeights,
    /// Append each sample's key-AU caption to its emotion caption.
    pub use_key_au_captions: bool,
    pub seed: u64,
}

impl Default for Mf2Config {
    fn default() -> Self {
        Self::toy()
    }
}

impl Mf2Config {
    /// Small dimensions for fixtures and tests: 32-pixel images, `D = 64`.
    pub fn toy() -> Self {
        let qformer = QFormerConfig {
            n_blocks: 1,
            n_queries: 8,
            n_heads: 4,
            ffn_dim: 128,
            d_proj: 32,
            ..QFormerConfig::default()
        };
        Self {
            encoder: EncoderConfig {
                image_size: 32,
                patch_size: 8,
                embed_dim: 64,
                vit_depth: 1,
                text_depth: 1,
                n_heads: 4,
                ffn_dim: 128,
                vocab_size: 0,
                max_text_len: 169,
                region_k: 3,
            },
            qformer_emo: qformer.clone(),
            qformer_au: qformer,
            branches: Branches::Both,
            loss: LossWeights::default(),
            use_key_au_captions: false,
            seed: 0,
        }
    }

    /// ViT-B/16 image encoders, 12-block Q-formers with 32 queries, BERT
    /// vocabulary. Text is embedded and then processed by the Q-former's
    /// own self-attention, so the text encoder has no blocks.
    pub fn full_scale() -> Self {
        let qformer = QFormerConfig {
            n_blocks: 12,
            n_queries: 32,
            n_heads: 12,
            ffn_dim: 3072,
            d_proj: 256,
            ..QFormerConfig::default()
        };
        Self {
            encoder: EncoderConfig {
                image_size: 224,
                patch_size: 16,
                embed_dim: 768,
                vit_depth: 12,
                text_depth: 0,
                n_heads: 12,
                ffn_dim: 3072,
                vocab_size: 30522,
                max_text_len: 169,
                region_k: 3,
            },
            qformer_emo: qformer.clone(),
            qformer_au: qformer,
            branches: Branches::Both,
            loss: LossWeights::default(),
            use_key_au_captions: false,
            seed: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.encoder.embed_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelError {
    MissingCaption(AuId),
    MissingEmotionCaption,
    MissingKeyAuCaption,
    UnlabeledSample(String),
    EmptyBatch,
    BadWeights(&'static str),
    VocabTooSmall { configured: usize, tokenizer: usize },
    Encoder(EncoderError),
    QFormer(QFormerError),
    Loss(LossError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::MissingCaption(au) => write!(f, "missing caption for {au}"),
            ModelError::MissingEmotionCaption => f.write_str("missing emotion caption"),
            ModelError::MissingKeyAuCaption => f.write_str("missing key-AU caption"),
            ModelError::UnlabeledSample(id) => write!(f, "sample {id} lacks labels"),
            ModelError::EmptyBatch => f.write_str("empty batch"),
            ModelError::BadWeights(why) => f.write_str(why),
            ModelError::VocabTooSmall {
                configured,
                tokenizer,
            } => {
                write!(
                    f,
                    "vocab_size {configured} is smaller than the tokenizer's {tokenizer}"
                )
            }
            ModelError::Encoder(e) => e.fmt(f),
            ModelError::QFormer(e) => e.fmt(f),
            ModelError::Loss(e) => e.fmt(f),
        }
    }
}

impl core::error::Error for ModelError {}

impl From<EncoderError> for ModelError {
    fn from(e: EncoderError) -> Self {
        ModelError::Encoder(e)
    }
}

impl From<QFormerError> for ModelError {
    fn from(e: QFormerError) -> Self {
        match e {
            QFormerError::Loss(l) => ModelError::Loss(l),
            other => ModelError::QFormer(other),
        }
    }
}

impl From<LossError> for ModelError {
    fn from(e: LossError) -> Self {
        ModelError::Loss(e)
    }
}

/// Encoders and Q-former of one branch.
#[derive(Clone, Debug)]
pub struct Branch {
    pub vit: VisualEncoder,
    pub text: TextEncoder,
    pub qformer: QFormer,
}

impl Branch {
    fn new(
        b: &mut Builder<'_>,
        name: &str,
        enc: &EncoderConfig,
        q: &QFormerConfig,
        vocab: usize,
    ) -> Self {
        Self {
            vit: VisualEncoder::new(b, &format!("{name}.vit"), enc),
            text: TextEncoder::new(b, &format!("{name}.text"), enc, vocab),
            qformer: QFormer::new(b, &format!("{name}.qformer"), enc.embed_dim, vocab, q),
        }
    }
}

/// Emotion probe and per-AU probes.
#[derive(Clone, Debug)]
pub struct Heads {
    pub emotion: Linear,
    pub au: Vec<Linear>,
}

impl Heads {
    fn new(b: &mut Builder<'_>, prefix: &str, dim: usize) -> Self {
        Self {
            emotion: Linear::new(b, &format!("{prefix}.emo"), dim, N_EMOTIONS),
            au: AuId::all()
                .map(|au| Linear::new(b, &format!("{prefix}.au{}", au.number()), dim, 1))
                .collect(),
        }
    }

    fn logits(&self, g: &mut Graph<'_>, emo: Var, au: &[Var]) -> (Var, Var) {
        let e = self.emotion.forward(g, emo);
        let cols: Vec<Var> = self
            .au
            .iter()
            .zip(au)
            .map(|(h, &x)| h.forward(g, x))
            .collect();
        (e, g.concat_cols(&cols))
    }

    fn param_ids(&self) -> Vec<crate::params::ParamId> {
        let mut ids = self.emotion.param_ids();
        for h in &self.au {
            ids.extend(h.param_ids());
        }
        ids
    }
}

/// Side adapters and replacement heads added for fine-tuning.
#[derive(Clone, Debug)]
pub struct DfnState {
    pub config: DfnConfig,
    pub emo: Option<BranchAdapters>,
    pub au: Option<BranchAdapters>,
    pub heads: Heads,
}

impl DfnState {
    pub fn cell_count(&self) -> usize {
        self.emo
            .iter()
            .chain(&self.au)
            .map(BranchAdapters::cell_count)
            .sum()
    }
}

#[derive(Clone, Copy)]
enum Which {
    Emo,
    Au,
}

impl Which {
    fn label(self) -> &'static str {
        match self {
            Which::Emo => "emo",
            Which::Au => "au",
        }
    }
}

/// Adapter view of one branch for one forward.
#[derive(Clone, Copy)]
struct Side<'a> {
    paths: Option<PathAdapters<'a>>,
    cls: Option<&'a BranchAdapters>,
}

/// Alignment losses of one branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BranchLosses {
    pub itc: f64,
    pub itm: f64,
    pub itg: f64,
}

/// Every loss term of one step. Terms whose weight is zero are not
/// evaluated and read 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub emo: Option<BranchLosses>,
    /// Mean over AUs of `au_per_au`.
    pub au: Option<BranchLosses>,
    pub au_per_au: Vec<BranchLosses>,
    pub ce_au: f64,
    pub ce_emo: f64,
    pub total: f64,
}

/// `Σ λ · term` over both branches and both recognizers.
pub fn total_loss(report: &LossReport, w: &LossWeights) -> f64 {
    let mut t = 0.0;
    for b in report.emo.iter().chain(&report.au) {
        t += w.itc * b.itc + w.itm * b.itm + w.itg * b.itg;
    }
    t + w.ce_au * report.ce_au + w.ce_emo * report.ce_emo
}

/// One labeled sample with tokenized captions.
#[derive(Clone, Copy, Debug)]
pub struct TrainRef<'a> {
    pub sample: &'a FaceSample,
    pub captions: &'a PreparedCaptions,
}

/// Graph handles of a training forward.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub total: Var,
    pub report: LossReport,
    /// `[M, 8]`.
    pub emotion_logits: Var,
    /// `[M, 12]`.
    pub au_logits: Var,
    /// Global branch unit embeddings, image and text, `[M, d_proj]` each.
    pub emo_embeddings: Option<(Var, Var)>,
    /// Local branch unit embeddings per AU.
    pub au_embeddings: Vec<(Var, Var)>,
}

/// Graph handles of an inference forward.
#[derive(Clone, Copy, Debug)]
pub struct InferOutput {
    /// `[B, 8]`.
    pub emotion_logits: Var,
    /// `[B, 12]`.
    pub au_logits: Var,
}

/// Pixels and landmarks of one face.
#[derive(Clone, Copy, Debug)]
pub struct FaceInput<'a> {
    pub image: &'a Image,
    pub landmarks: &'a Landmarks,
}

impl<'a> From<&'a FaceSample> for FaceInput<'a> {
    fn from(s: &'a FaceSample) -> Self {
        Self {
            image: &s.image,
            landmarks: &s.landmarks,
        }
    }
}

struct AlignInput<'t> {
    visual: Var,
    vdelta: Option<Var>,
    text: &'t TokenizedText,
}

struct AlignOutput {
    features: Vec<Var>,
    itc: Var,
    itm: Var,
    itg: Var,
    embeddings: (Var, Var),
}

#[derive(Clone, Debug)]
pub struct Mf2Model {
    pub config: Mf2Config,
    pub store: ParamStore,
    pub tokenizer: Tokenizer,
    pub au_map: AuLandmarkMap,
    pub emo: Option<Branch>,
    pub au: Option<Branch>,
    pub heads: Heads,
    pub dfn: Option<DfnState>,
}

impl Mf2Model {
    pub fn new(
        config: Mf2Config,
        tokenizer: Tokenizer,
        au_map: AuLandmarkMap,
    ) -> Result<Self, ModelError> {
        Self::build(config, tokenizer, au_map, ParamStore::new())
    }

    /// Builds into `store`, which may be a shape-only store for counting.
    pub fn build(
        config: Mf2Config,
        tokenizer: Tokenizer,
        au_map: AuLandmarkMap,
        mut store: ParamStore,
    ) -> Result<Self, ModelError> {
        config.loss.validate()?;
        au_map.validate()?;
        let vocab = match config.encoder.vocab_size {
            0 => tokenizer.len(),
            v if v < tokenizer.len() => {
                return Err(ModelError::VocabTooSmall {
                    configured: v,
                    tokenizer: tokenizer.len(),
                })
            }
            v => v,
        };
        let mut r = rng::stream(config.seed, "model-init");
        let mut b = Builder::new(&mut store, &mut r);
        let enc = &config.encoder;
        let emo = config
            .branches
            .has_emotion()
            .then(|| Branch::new(&mut b, "emo", enc, &config.qformer_emo, vocab));
        let au = config
            .branches
            .has_au()
            .then(|| Branch::new(&mut b, "au", enc, &config.qformer_au, vocab));
        let heads = Heads::new(&mut b, "head", enc.embed_dim);
        Ok(Self {
            config,
            store,
            tokenizer,
            au_map,
            emo,
            au,
            heads,
            dfn: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    /// Text-encoder calls across branches since the last reset.
    pub fn text_calls(&self) -> usize {
        self.emo
            .iter()
            .chain(&self.au)
            .map(|b| b.text.calls())
            .sum()
    }

    pub fn reset_text_calls(&self) {
        for b in self.emo.iter().chain(&self.au) {
            b.text.reset_calls();
        }
    }

    fn branch(&self, w: Which) -> Option<&Branch> {
        match w {
            Which::Emo => self.emo.as_ref(),
            Which::Au => self.au.as_ref(),
        }
    }

    fn side(&self, w: Which) -> Side<'_> {
        let Some(d) = &self.dfn else {
            return Side {
                paths: None,
                cls: None,
            };
        };
        let ad = match w {
            Which::Emo => d.emo.as_ref(),
            Which::Au => d.au.as_ref(),
        };
        match (d.config.tap, ad) {
            (Tap::Blockwise, Some(a)) => Side {
                paths: Some(a.paths()),
                cls: None,
            },
            (Tap::ClsLastLayer, Some(a)) => Side {
                paths: None,
                cls: Some(a),
            },
            _ => Side {
                paths: None,
                cls: None,
            },
        }
    }

    fn active_heads(&self) -> &Heads {
        self.dfn.as_ref().map_or(&self.heads, |d| &d.heads)
    }

    fn cls_delta(
        g: &mut Graph<'_>,
        cells: Option<&[dfn::AdapterCell]>,
        tokens: Var,
    ) -> Option<Var> {
        let cells = cells?;
        let cls = g.slice_rows(tokens, 0, 1);
        Some(stack_delta(g, cells, cls))
    }

    fn pooled(g: &mut Graph<'_>, qf: &QFormer, query_out: Var, vdelta: Option<Var>) -> Var {
        let p = qf.pool(g, query_out);
        match vdelta {
            Some(d) => g.add(p, d),
            None => p,
        }
    }

    /// Global tokens, or per-AU windows, of one face, with the CLS-tap
    /// adapter offset when one is attached.
    fn visual_inputs(
        &self,
        g: &mut Graph<'_>,
        w: Which,
        face: FaceInput<'_>,
    ) -> Result<(Vec<Var>, Option<Var>), ModelError> {
        let br = self.branch(w).expect("branch exists");
        let side = self.side(w);
        let fm = br.vit.encode_image(g, face.image)?;
        let vdelta = Self::cls_delta(g, side.cls.map(|c| c.visual.as_slice()), fm.tokens);
        let tokens = match w {
            Which::Emo => vec![fm.tokens],
            Which::Au => {
                extract_au_regions(
                    g,
                    &fm,
                    face.landmarks,
                    &self.au_map,
                    self.config.encoder.region_k,
                )?
                .regions
            }
        };
        Ok((tokens, vdelta))
    }

    fn infer_features(
        &self,
        g: &mut Graph<'_>,
        w: Which,
        face: FaceInput<'_>,
    ) -> Result<Vec<Var>, ModelError> {
        let br = self.branch(w).expect("branch exists");
        let side = self.side(w);
        let (tokens, vdelta) = self.visual_inputs(g, w, face)?;
        tokens
            .into_iter()
            .map(|t| {
                let st = br
                    .qformer
                    .forward(g, t, None, Mode::Infer, side.paths.as_ref())?;
                Ok(Self::pooled(g, &br.qformer, st.query_out, vdelta))
            })
            .collect()
    }

    /// Head inputs `(emotion [M, D], per-AU [M, D] x 12)` from stacked
    /// branch features.
    fn route(&self, g: &mut Graph<'_>, emo: Option<Var>, au: Option<Vec<Var>>) -> (Var, Vec<Var>) {
        match (emo, au) {
            (Some(e), Some(a)) => (e, a),
            (None, Some(a)) => {
                let mut sum = a[0];
                for &x in &a[1..] {
                    sum = g.add(sum, x);
                }
                (g.scale(sum, 1.0 / N_AUS as f64), a)
            }
            (Some(e), None) => (e, vec![e; N_AUS]),
            (None, None) => unreachable!("a model has at least one branch"),
        }
    }

    /// Image-only prediction. No text encoder is called.
    pub fn forward_infer(
        &self,
        g: &mut Graph<'_>,
        faces: &[FaceInput<'_>],
    ) -> Result<InferOutput, ModelError> {
        if faces.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut emo_rows = Vec::new();
        let mut au_rows: Vec<Vec<Var>> = vec![Vec::new(); N_AUS];
        for &face in faces {
            if self.emo.is_some() {
                emo_rows.push(self.infer_features(g, Which::Emo, face)?[0]);
            }
            if self.au.is_some() {
                for (a, f) in self
                    .infer_features(g, Which::Au, face)?
                    .into_iter()
                    .enumerate()
                {
                    au_rows[a].push(f);
                }
            }
        }
        let emo = (!emo_rows.is_empty()).then(|| g.concat_rows(&emo_rows));
        let au = self
            .au
            .is_some()
            .then(|| au_rows.iter().map(|r| g.concat_rows(r)).collect::<Vec<_>>());
        let (e, a) = self.route(g, emo, au);
        let (emotion_logits, au_logits) = self.active_heads().logits(g, e, &a);
        Ok(InferOutput {
            emotion_logits,
            au_logits,
        })
    }

    fn align(
        &self,
        g: &mut Graph<'_>,
        w: Which,
        inputs: &[AlignInput<'_>],
        step_seed: u64,
    ) -> Result<AlignOutput, ModelError> {
        let br = self.branch(w).expect("branch exists");
        let qf = &br.qformer;
        let side = self.side(w);
        let paths = side.paths.as_ref();
        let weights = &self.config.loss;
        let m = inputs.len();

        let mut features = Vec::with_capacity(m);
        let mut v_rows = Vec::with_capacity(m);
        let mut s_rows = Vec::with_capacity(m);
        let mut texts: Vec<TextEmbedding> = Vec::with_capacity(m);
        for inp in inputs {
            let emb = br.text.encode_ids(g, inp.text)?;
            let st = qf.forward(g, inp.visual, Some(&emb), Mode::Itc, paths)?;
            let feat = Self::pooled(g, qf, st.query_out, inp.vdelta);
            features.push(feat);
            v_rows.push(qf.image_embed(g, feat));
            let text_out = st.text_out.expect("text mode has text rows");
            let mut cls = g.slice_rows(text_out, 0, 1);
            if let Some(d) = Self::cls_delta(g, side.cls.map(|c| c.text.as_slice()), emb.tokens) {
                cls = g.add(cls, d);
            }
            s_rows.push(qf.text_embed(g, cls));
            texts.push(emb);
        }
        let v = g.concat_rows(&v_rows);
        let s = g.concat_rows(&s_rows);
        let zero = || Matrix::scalar(0.0);

        let itc = if weights.itc > 0.0 {
            let tau = qf.temperature(g);
            itc_loss(g, v, s, tau)?
        } else {
            g.constant(zero())
        };

        let itm = if weights.itm > 0.0 && m >= 2 {
            let seed = rng::hash64(step_seed ^ qf.config.negatives_seed, w.label().as_bytes());
            let cands = sample_negatives(m, seed)?;
            let mut logits = Vec::with_capacity(cands.len());
            for c in &cands {
                let inp = &inputs[c.image];
                let st = qf.forward(g, inp.visual, Some(&texts[c.text]), Mode::Itm, paths)?;
                let feat = Self::pooled(g, qf, st.query_out, inp.vdelta);
                logits.push(qf.itm_logit(g, feat));
            }
            let z = g.concat_rows(&logits);
            let labels: Vec<u8> = cands.iter().map(|c| c.label).collect();
            itm_loss(g, z, &labels)?
        } else {
            g.constant(zero())
        };

        let itg = if weights.itg > 0.0 {
            let mut per = Vec::with_capacity(m);
            for (i, inp) in inputs.iter().enumerate() {
                let (emb, targets) = match qf.config.itg_style {
                    ItgStyle::Masked => {
                        let mut r = rng::stream(step_seed, &format!("itg:{}:{i}", w.label()));
                        let positions =
                            sample_mask_positions(&inp.text.mask, qf.config.mask_prob, &mut r);
                        let mut ids = inp.text.ids.clone();
                        for &p in &positions {
                            ids[p] = MASK;
                        }
                        let masked = TokenizedText {
                            ids,
                            mask: inp.text.mask.clone(),
                            truncated: inp.text.truncated,
                        };
                        let emb = br.text.encode_ids(g, &masked)?;
                        (emb, TokenTargets::masked(positions, &inp.text.ids))
                    }
                    ItgStyle::Causal => (
                        texts[i].clone(),
                        TokenTargets::causal(&inp.text.ids, &inp.text.mask),
                    ),
                };
                let st = qf.forward(g, inp.visual, Some(&emb), Mode::Itg, paths)?;
                let text_out = st.text_out.expect("text mode has text rows");
                let logits = qf.lm_logits(g, text_out, br.text.token_embed);
                per.push(itg_loss(g, logits, &targets)?);
            }
            let all = g.concat_cols(&per);
            let sum = g.sum_all(all);
            g.scale(sum, 1.0 / m as f64)
        } else {
            g.constant(zero())
        };

        Ok(AlignOutput {
            features,
            itc,
            itm,
            itg,
            embeddings: (v, s),
        })
    }

    /// Joint objective over a labeled, captioned batch.
    ///
    /// `step_seed` drives generation masking and negative sampling. With
    /// every alignment weight at zero the text path is skipped and head
    /// features come from image-only passes, which are bit-identical to the
    /// contrastive-pass features.
    pub fn forward_train(
        &self,
        g: &mut Graph<'_>,
        batch: &[TrainRef<'_>],
        step_seed: u64,
    ) -> Result<TrainOutput, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let m = batch.len();
        let weights = self.config.loss;
        let aligns = weights.aligns();
        let mut report = LossReport::default();
        let mut terms: Vec<(f64, Var)> = Vec::new();

        let mut emo_feat = None;
        let mut emo_embeddings = None;
        if self.emo.is_some() {
            let mut tokens = Vec::with_capacity(m);
            for item in batch {
                tokens.push(self.visual_inputs(g, Which::Emo, item.sample.into())?);
            }
            let feats = if aligns {
                let mut inputs = Vec::with_capacity(m);
                for ((t, vd), item) in tokens.iter().zip(batch) {
                    inputs.push(AlignInput {
                        visual: t[0],
                        vdelta: *vd,
                        text: item
                            .captions
                            .emotion
                            .as_ref()
                            .ok_or(ModelError::MissingEmotionCaption)?,
                    });
                }
                let out = self.align(g, Which::Emo, &inputs, step_seed)?;
                report.emo = Some(BranchLosses {
                    itc: g.value(out.itc).item(),
                    itm: g.value(out.itm).item(),
                    itg: g.value(out.itg).item(),
                });
                terms.extend([
                    (weights.itc, out.itc),
                    (weights.itm, out.itm),
                    (weights.itg, out.itg),
                ]);
                emo_embeddings = Some(out.embeddings);
                out.features
            } else {
                report.emo = Some(BranchLosses::default());
                let br = self.emo.as_ref().expect("checked");
                let paths = self.side(Which::Emo).paths;
                let mut f = Vec::with_capacity(m);
                for (t, vd) in &tokens {
                    let st = br
                        .qformer
                        .forward(g, t[0], None, Mode::Infer, paths.as_ref())?;
                    f.push(Self::pooled(g, &br.qformer, st.query_out, *vd));
                }
                f
            };
            emo_feat = Some(g.concat_rows(&feats));
        }

        let mut au_feats = None;
        let mut au_embeddings = Vec::new();
        if self.au.is_some() {
            let mut windows = Vec::with_capacity(m);
            for item in batch {
                windows.push(self.visual_inputs(g, Which::Au, item.sample.into())?);
            }
            let mut per_au_feats = Vec::with_capacity(N_AUS);
            let mut sums = [None::<Var>; 3];
            for a in 0..N_AUS {
                let feats = if aligns {
                    let mut inputs = Vec::with_capacity(m);
                    for ((t, vd), item) in windows.iter().zip(batch) {
                        let missing =
                            ModelError::MissingCaption(AuId::from_index(a).expect("AU index"));
                        inputs.push(AlignInput {
                            visual: t[a],
                            vdelta: *vd,
                            text: item.captions.au.get(a).ok_or(missing)?,
                        });
                    }
                    let out = self.align(g, Which::Au, &inputs, step_seed)?;
                    report.au_per_au.push(BranchLosses {
                        itc: g.value(out.itc).item(),
                        itm: g.value(out.itm).item(),
                        itg: g.value(out.itg).item(),
                    });
                    for (slot, v) in sums.iter_mut().zip([out.itc, out.itm, out.itg]) {
                        *slot = Some(match *slot {
                            Some(s) => g.add(s, v),
                            None => v,
                        });
                    }
                    au_embeddings.push(out.embeddings);
                    out.features
                } else {
                    report.au_per_au.push(BranchLosses::default());
                    let br = self.au.as_ref().expect("checked");
                    let paths = self.side(Which::Au).paths;
                    let mut f = Vec::with_capacity(m);
                    for (t, vd) in &windows {
                        let st = br
                            .qformer
                            .forward(g, t[a], None, Mode::Infer, paths.as_ref())?;
                        f.push(Self::pooled(g, &br.qformer, st.query_out, *vd));
                    }
                    f
                };
                per_au_feats.push(g.concat_rows(&feats));
            }
            let n = N_AUS as f64;
            let mean =
                |f: fn(&BranchLosses) -> f64| report.au_per_au.iter().map(f).sum::<f64>() / n;
            report.au = Some(BranchLosses {
                itc: mean(|b| b.itc),
                itm: mean(|b| b.itm),
                itg: mean(|b| b.itg),
            });
            if aligns {
                let ws = [weights.itc, weights.itm, weights.itg];
                for (w, s) in ws.into_iter().zip(sums) {
                    let s = s.expect("twelve AUs");
                    terms.push((w, g.scale(s, 1.0 / n)));
                }
            }
            au_feats = Some(per_au_feats);
        }

        let (e, a) = self.route(g, emo_feat, au_feats);
        let (emotion_logits, au_logits) = self.active_heads().logits(g, e, &a);

        let lp = g.log_softmax(emotion_logits);
        let index: Vec<usize> = batch
            .iter()
            .enumerate()
            .map(|(i, item)| i * N_EMOTIONS + item.sample.emotion.index())
            .collect();
        let picked = g.gather(lp, Rc::new(index), 1, m);
        let nll = g.sum_all(picked);
        let ce_emo = g.scale(nll, -1.0 / m as f64);
        let targets: Vec<f64> = batch
            .iter()
            .flat_map(|item| item.sample.au_labels.0.iter().map(|&y| f64::from(y)))
            .collect();
        let bce = g.bce_with_logits(au_logits, targets);
        let ce_au = g.scale(bce, 1.0 / m as f64);
        report.ce_emo = g.value(ce_emo).item();
        report.ce_au = g.value(ce_au).item();
        terms.extend([(weights.ce_au, ce_au), (weights.ce_emo, ce_emo)]);

        let mut total: Option<Var> = None;
        for (w, v) in terms {
            if w == 0.0 {
                continue;
            }
            let t = g.scale(v, w);
            total = Some(match total {
                Some(acc) => g.add(acc, t),
                None => t,
            });
        }
        let total = total.expect("at least one weight is nonzero");
        report.total = g.value(total).item();

        Ok(TrainOutput {
            total,
            report,
            emotion_logits,
            au_logits,
            emo_embeddings,
            au_embeddings,
        })
    }

    /// Adds side adapters and fresh heads. In blockwise mode every branch
    /// gets one cell per Q-former block on each of its two pathways.
    pub fn attach_dfn(&mut self, cfg: &DfnConfig) -> Result<(), DfnError> {
        if self.dfn.is_some() {
            return Err(DfnError::AlreadyAttached);
        }
        cfg.validate(self.dim())?;
        let d = self.dim();
        let mut r = rng::stream(self.config.seed, "dfn-init");
        let mut b = Builder::new(&mut self.store, &mut r);
        let n_cells = |q: &QFormerConfig| match cfg.tap {
            Tap::Blockwise => q.n_blocks,
            Tap::ClsLastLayer => cfg.n_adapter_layers,
        };
        let emo = self.emo.as_ref().map(|_| {
            BranchAdapters::build(&mut b, "emo", d, n_cells(&self.config.qformer_emo), cfg)
        });
        let au = self
            .au
            .as_ref()
            .map(|_| BranchAdapters::build(&mut b, "au", d, n_cells(&self.config.qformer_au), cfg));
        let heads = Heads::new(&mut b, &format!("{}head", dfn::PREFIX), d);
        if !cfg.reinit_heads && !self.store.is_shape_only() {
            for (dst, src) in heads.param_ids().into_iter().zip(self.heads.param_ids()) {
                let v = self.store.value(src).clone();
                *self.store.value_mut(dst) = v;
            }
        }
        self.dfn = Some(DfnState {
            config: cfg.clone(),
            emo,
            au,
            heads,
        });
        Ok(())
    }

    /// Freezes everything except the adapters and their heads.
    pub fn freeze_backbone(&mut self) -> Result<FreezeReport, DfnError> {
        if self.dfn.is_none() {
            return Err(DfnError::NotAttached);
        }
        Ok(dfn::freeze_all_but_prefix(&mut self.store, dfn::PREFIX))
    }

    pub fn unfreeze_all(&mut self) -> FreezeReport {
        dfn::freeze_all_but_prefix(&mut self.store, "")
    }

    /// Checksum of every parameter outside the adapter network.
    pub fn backbone_checksum(&self) -> String {
        self.store.checksum(|p| !p.name().starts_with(dfn::PREFIX))
    }

    /// Checksum of the adapter network, empty-input hash when absent.
    pub fn adapter_checksum(&self) -> String {
        self.store.checksum(|p| p.name().starts_with(dfn::PREFIX))
    }

    /// Tokenizes one sample's captions within the configured budgets.
    pub fn prepare_captions(
        &self,
        captions: &SampleCaptions,
        budgets: &crate::annotation::CaptionBudgets,
    ) -> Result<PreparedCaptions, ModelError> {
        captions::prepare(self, captions, budgets)
    }
}

/// Converts a manifest record plus pixels into a labeled sample.
pub fn labeled_sample(
    record: &crate::data::ManifestRecord,
    image: Image,
) -> Result<FaceSample, ModelError> {
    match (record.au_labels, record.emotion) {
        (Some(au_labels), Some(emotion)) => Ok(FaceSample {
            sample_id: record.sample_id.clone(),
            video_id: record.video_id.clone(),
            frame_index: record.frame_index,
            image,
            landmarks: record.landmarks.clone(),
            au_labels,
            emotion,
        }),
        _ => Err(ModelError::UnlabeledSample(record.sample_id.clone())),
    }
}
