//! Visual and text encoders plus AU region extraction.
//!
//! Both encoders are small trainable transformers. They sit behind
//! [`ImageEncoder`] and [`TextEncoding`] so pretrained backbones can replace
//! them without touching the alignment code.

pub mod regions;
pub mod text;
pub mod tokenizer;
pub mod visual;

use core::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{AuId, Image};

pub use regions::{extract_au_regions, AuLandmarkMap, AuRegionSet};
pub use text::{TextEmbedding, TextEncoder};
pub use tokenizer::{TokenizedText, Tokenizer};
pub use visual::VisualEncoder;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EncoderError {
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    BadAuMap(AuId),
    BadRegionSize {
        k: usize,
        grid: (usize, usize),
    },
    EmptyText,
    TokenOutOfRange(u32),
}

impl fmt::Display for EncoderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderError::ShapeMismatch { expected, got } => write!(
                f,
                "image is {}x{}, encoder expects {}x{}",
                got.0, got.1, expected.0, expected.1
            ),
            EncoderError::BadAuMap(au) => write!(f, "AU map has no usable entry for {au}"),
            EncoderError::BadRegionSize { k, grid } => {
                write!(
                    f,
                    "region size {k} does not fit a {}x{} grid",
                    grid.0, grid.1
                )
            }
            EncoderError::EmptyText => f.write_str("text is empty"),
            EncoderError::TokenOutOfRange(id) => write!(f, "token id {id} outside the vocabulary"),
        }
    }
}

impl core::error::Error for EncoderError {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub vit_depth: usize,
    pub text_depth: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Embedding rows of the text encoder; 0 means "size of the tokenizer".
    pub vocab_size: usize,
    /// Longest token sequence the text encoder accepts, CLS included.
    pub max_text_len: usize,
    pub region_k: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            embed_dim: 64,
            vit_depth: 2,
            text_depth: 1,
            n_heads: 4,
            ffn_dim: 128,
            vocab_size: 0,
            max_text_len: 169,
            region_k: 3,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size;
        (g, g)
    }

    pub fn n_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }
}

/// Patch and CLS tokens of one image.
#[derive(Clone, Copy, Debug)]
pub struct VisualFeatureMap {
    /// `[P + 1, D]`, CLS first.
    pub tokens: Var,
    pub grid: (usize, usize),
    pub patch_size: usize,
}

/// Anything that turns an image into a [`VisualFeatureMap`].
pub trait ImageEncoder {
    fn encode_image(
        &self,
        g: &mut Graph<'_>,
        image: &Image,
    ) -> Result<VisualFeatureMap, EncoderError>;
}

/// Anything that embeds token ids into a [`TextEmbedding`].
pub trait TextEncoding {
    fn encode_ids(
        &self,
        g: &mut Graph<'_>,
        text: &TokenizedText,
    ) -> Result<TextEmbedding, EncoderError>;
}
