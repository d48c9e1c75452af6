//! Word-level tokenizer with a byte fallback.
//!
//! Text is split on whitespace, then into alphanumeric runs and single
//! punctuation characters. Known pieces map to one word token (compared in
//! lowercase); anything else becomes one token per UTF-8 byte, so every
//! string is representable.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::EncoderError;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const MASK: u32 = 2;
const N_SPECIAL: u32 = 3;
const BYTE_BASE: u32 = N_SPECIAL;
const FIRST_WORD: u32 = BYTE_BASE + 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
}

/// Token ids of one text, CLS first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<u32>,
    /// 1 for real tokens, 0 for padding; same length as `ids`.
    pub mask: Vec<u8>,
    /// True when the text had more tokens than the budget allowed.
    pub truncated: bool,
}

impl TokenizedText {
    /// Unpadded sequence.
    pub fn new(ids: Vec<u32>) -> Self {
        let mask = alloc::vec![1; ids.len()];
        Self {
            ids,
            mask,
            truncated: false,
        }
    }

    /// Appends masked `PAD` slots up to `len`.
    pub fn pad_to(mut self, len: usize) -> Self {
        while self.ids.len() < len {
            self.ids.push(PAD);
            self.mask.push(0);
        }
        self
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Splits text into word and punctuation pieces.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut start = None;
        for (i, c) in chunk.char_indices() {
            if c.is_alphanumeric() {
                start.get_or_insert(i);
            } else {
                if let Some(s) = start.take() {
                    out.push(&chunk[s..i]);
                }
                out.push(&chunk[i..i + c.len_utf8()]);
            }
        }
        if let Some(s) = start {
            out.push(&chunk[s..]);
        }
    }
    out
}

impl Tokenizer {
    /// Vocabulary covering every word the built-in caption templates emit.
    pub fn builtin() -> Self {
        Self::from_corpus(crate::annotation::mock::template_corpus())
    }

    /// Vocabulary made of every distinct piece in `texts`, in first-seen
    /// order.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut t = Self {
            words: Vec::new(),
            index: BTreeMap::new(),
        };
        for text in texts {
            t.extend(pretokenize(text).into_iter().map(ToString::to_string));
        }
        t
    }

    /// Adds words not yet known; returns how many were new.
    pub fn extend(&mut self, words: impl IntoIterator<Item = String>) -> usize {
        let mut added = 0;
        for w in words {
            let key = w.to_lowercase();
            if key.is_empty() || self.index.contains_key(&key) {
                continue;
            }
            // single ASCII bytes already have byte tokens
            if key.len() == 1 && !key.as_bytes()[0].is_ascii_alphanumeric() {
                continue;
            }
            let id = FIRST_WORD + self.words.len() as u32;
            self.index.insert(key.clone(), id);
            self.words.push(key);
            added += 1;
        }
        added
    }

    /// Total vocabulary size including special and byte tokens.
    pub fn len(&self) -> usize {
        (FIRST_WORD as usize) + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Token ids of `text` without the leading CLS.
    pub fn pieces(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for piece in pretokenize(text) {
            match self.index.get(&piece.to_lowercase()) {
                Some(&id) => ids.push(id),
                None => ids.extend(piece.bytes().map(|b| BYTE_BASE + u32::from(b))),
            }
        }
        ids
    }

    /// Sequence length of `text` as the encoder sees it, CLS included.
    pub fn token_count(&self, text: &str) -> usize {
        1 + self.pieces(text).len()
    }

    /// CLS plus pieces, cut to `max_len` tokens.
    ///
    /// # Errors
    /// [`EncoderError::EmptyText`] when `text` has no pieces.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<TokenizedText, EncoderError> {
        let pieces = self.pieces(text);
        if pieces.is_empty() {
            return Err(EncoderError::EmptyText);
        }
        let mut ids = Vec::with_capacity(pieces.len() + 1);
        ids.push(CLS);
        ids.extend(pieces);
        let truncated = ids.len() > max_len;
        ids.truncate(max_len.max(1));
        let mut t = TokenizedText::new(ids);
        t.truncated = truncated;
        Ok(t)
    }

    /// Readable form of an id, for debugging and reports.
    pub fn token_str(&self, id: u32) -> String {
        match id {
            PAD => "[PAD]".into(),
            CLS => "[CLS]".into(),
            MASK => "[MASK]".into(),
            b if b < FIRST_WORD => alloc::format!("<0x{:02X}>", b - BYTE_BASE),
            w => self
                .words
                .get((w - FIRST_WORD) as usize)
                .cloned()
                .unwrap_or_else(|| "[UNK]".into()),
        }
    }
}
