use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use super::tokenizer::{TokenizedText, Tokenizer};
use super::{EncoderConfig, EncoderError, TextEncoding};
use crate::autograd::{AttnMask, Graph, Var};
use crate::nn::{Builder, EncoderBlock, LayerNorm, INIT_STD};
use crate::params::{Init, ParamId};
use crate::tensor::Matrix;

/// Token rows of one text, CLS at row 0.
#[derive(Clone, Debug)]
pub struct TextEmbedding {
    /// `[L, D]`; padded rows are exactly zero.
    pub tokens: Var,
    /// 1 for real tokens, 0 for padding.
    pub attention_mask: Vec<u8>,
    pub truncated: bool,
}

impl TextEmbedding {
    pub fn len(&self) -> usize {
        self.attention_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attention_mask.is_empty()
    }
}

/// Token and position embeddings followed by pre-norm blocks.
///
/// Every call through [`TextEncoding::encode_ids`] increments a counter,
/// which tests use to prove the inference path never touches text.
#[derive(Debug)]
pub struct TextEncoder {
    pub token_embed: ParamId,
    pub pos: ParamId,
    pub ln_embed: LayerNorm,
    pub blocks: Vec<EncoderBlock>,
    vocab_size: usize,
    max_len: usize,
    calls: AtomicUsize,
}

impl Clone for TextEncoder {
    fn clone(&self) -> Self {
        Self {
            token_embed: self.token_embed,
            pos: self.pos,
            ln_embed: self.ln_embed.clone(),
            blocks: self.blocks.clone(),
            vocab_size: self.vocab_size,
            max_len: self.max_len,
            calls: AtomicUsize::new(self.calls()),
        }
    }
}

impl TextEncoder {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: &EncoderConfig, vocab_size: usize) -> Self {
        let d = cfg.embed_dim;
        Self {
            token_embed: b.add(
                &format!("{name}.token_embed"),
                vocab_size,
                d,
                Init::Normal(INIT_STD),
            ),
            pos: b.add(
                &format!("{name}.pos"),
                cfg.max_text_len,
                d,
                Init::Normal(INIT_STD),
            ),
            ln_embed: LayerNorm::new(b, &format!("{name}.ln_embed"), d),
            blocks: (0..cfg.text_depth)
                .map(|i| {
                    EncoderBlock::new(b, &format!("{name}.block{i}"), d, cfg.n_heads, cfg.ffn_dim)
                })
                .collect(),
            vocab_size,
            max_len: cfg.max_text_len,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Number of encode calls since construction or the last reset.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    /// Tokenizes with `budget` (capped at the encoder's maximum) and encodes.
    pub fn encode_text(
        &self,
        g: &mut Graph<'_>,
        tokenizer: &Tokenizer,
        text: &str,
        budget: usize,
    ) -> Result<TextEmbedding, EncoderError> {
        let tok = tokenizer.encode(text, budget.min(self.max_len))?;
        self.encode_ids(g, &tok)
    }
}

impl TextEncoding for TextEncoder {
    fn encode_ids(
        &self,
        g: &mut Graph<'_>,
        text: &TokenizedText,
    ) -> Result<TextEmbedding, EncoderError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        if text.ids.is_empty() || text.mask.iter().all(|&m| m == 0) {
            return Err(EncoderError::EmptyText);
        }
        assert_eq!(
            text.ids.len(),
            text.mask.len(),
            "token/mask length mismatch"
        );
        if let Some(&bad) = text.ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(EncoderError::TokenOutOfRange(bad));
        }
        let l = text.ids.len().min(self.max_len);
        let ids: Vec<usize> = text.ids[..l].iter().map(|&id| id as usize).collect();
        let attention_mask: Vec<u8> = text.mask[..l].iter().map(|&m| u8::from(m != 0)).collect();
        let padded = attention_mask.iter().any(|&m| m == 0);

        let table = g.param(self.token_embed);
        let emb = g.select_rows(table, &ids);
        let pos = g.param(self.pos);
        let pos = g.slice_rows(pos, 0, l);
        let x = g.add(emb, pos);
        let mut x = self.ln_embed.forward(g, x);
        let key_mask = padded.then(|| {
            let m = attention_mask.clone();
            Rc::new(AttnMask::from_fn(l, l, move |_, j| m[j] == 1))
        });
        for block in &self.blocks {
            x = block.forward(g, x, key_mask.clone());
        }
        if padded {
            let d = g.shape(x).1;
            let mut keep = Matrix::zeros(l, d);
            for (i, &m) in attention_mask.iter().enumerate() {
                keep.row_mut(i).fill(f64::from(m));
            }
            let keep = g.constant(keep);
            x = g.mul(x, keep);
        }
        Ok(TextEmbedding {
            tokens: x,
            attention_mask,
            truncated: text.truncated || text.ids.len() > self.max_len,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::rng;
    fn build() -> (ParamStore, TextEncoder, Tokenizer) {
        let tok = Tokenizer::builtin();
        let cfg = EncoderConfig {
            embed_dim: 8,
            n_heads: 2,
            ffn_dim: 16,
            text_depth: 1,
            max_text_len: 169,
            ..EncoderConfig::default()
        };
        let mut store = ParamStore::new();
        let mut r = rng::stream(3, "text");
        let enc = TextEncoder::new(
            &mut Builder::new(&mut store, &mut r),
            "text",
            &cfg,
            tok.len(),
        );
        (store, enc, tok)
    }

    #[test]
    fn empty_text_is_rejected() {
        let (store, enc, tok) = build();
        let mut g = Graph::new(&store);
        assert_eq!(
            enc.encode_text(&mut g, &tok, "", 61).unwrap_err(),
            EncoderError::EmptyText
        );
    }

    #[test]
    fn encoding_is_deterministic() {
        let (store, enc, tok) = build();
        let run = || {
            let mut g = Graph::new(&store);
            let e = enc
                .encode_text(&mut g, &tok, "The face shows Happiness.", 61)
                .unwrap();
            g.value(e.tokens).clone()
        };
        assert_eq!(run(), run());
        assert_eq!(enc.calls(), 2);
    }

    #[test]
    fn long_caption_truncates_to_budget() {
        let (store, enc, tok) = build();
        let text = "happiness ".repeat(69);
        assert_eq!(tok.token_count(&text), 70);
        let mut g = Graph::new(&store);
        let e = enc.encode_text(&mut g, &tok, &text, 61).unwrap();
        assert_eq!(e.len(), 61);
        assert!(e.truncated);
    }

    #[test]
    fn padded_positions_do_not_leak() {
        let (store, enc, tok) = build();
        let base = tok.encode("The face shows Anger.", 61).unwrap();
        let real = base.len();
        let padded = base.pad_to(real + 3);
        let run = |t: &TokenizedText| {
            let mut g = Graph::new(&store);
            let e = enc.encode_ids(&mut g, t).unwrap();
            g.value(e.tokens).clone()
        };
        let reference = run(&padded);
        for pos in real..padded.len() {
            for replacement in [5u32, 300] {
                let mut probe = padded.clone();
                probe.ids[pos] = replacement;
                assert_eq!(run(&probe), reference, "slot {pos} leaked");
            }
        }
        assert!(reference.row(real).iter().all(|&v| v == 0.0));
    }
}
