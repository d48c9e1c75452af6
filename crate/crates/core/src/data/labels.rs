//! Action unit and emotion vocabularies.
//!
//! Orders are fixed: AUs follow the AU-recognition table columns
//! (1, 2, 4, 6, 7, 10, 12, 15, 23, 24, 25, 26) and emotions follow the
//! emotion-recognition table columns (Neutral ... Other). Every report and
//! every logit vector uses these orders.

use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

pub const N_AUS: usize = 12;
pub const N_EMOTIONS: usize = 8;

pub const AU_NUMBERS: [u8; N_AUS] = [1, 2, 4, 6, 7, 10, 12, 15, 23, 24, 25, 26];

const AU_NAMES: [&str; N_AUS] = [
    "inner brow raiser",
    "outer brow raiser",
    "brow lowerer",
    "cheek raiser",
    "lid tightener",
    "upper lip raiser",
    "lip corner puller",
    "lip corner depressor",
    "lip tightener",
    "lip pressor",
    "lips part",
    "jaw drop",
];

/// One of the twelve tracked action units, stored by table index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct AuId(u8);

impl AuId {
    /// Looks up a FACS number such as `12`.
    pub fn from_number(number: u8) -> Option<Self> {
        AU_NUMBERS
            .iter()
            .position(|&n| n == number)
            .map(|i| AuId(i as u8))
    }

    pub fn from_index(index: usize) -> Option<Self> {
        (index < N_AUS).then_some(AuId(index as u8))
    }

    pub fn all() -> impl Iterator<Item = AuId> + Clone {
        (0..N_AUS as u8).map(AuId)
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn number(self) -> u8 {
        AU_NUMBERS[self.index()]
    }

    pub fn name(self) -> &'static str {
        AU_NAMES[self.index()]
    }
}

impl fmt::Display for AuId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AU{}", self.number())
    }
}

impl TryFrom<u8> for AuId {
    type Error = LabelError;

    fn try_from(number: u8) -> Result<Self, Self::Error> {
        AuId::from_number(number).ok_or(LabelError::UnknownAu(number as u32))
    }
}

impl From<AuId> for u8 {
    fn from(id: AuId) -> u8 {
        id.number()
    }
}

impl FromStr for AuId {
    type Err = LabelError;

    /// Accepts `"AU12"` or `"12"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let digits = s.strip_prefix("AU").unwrap_or(s);
        let n: u32 = digits.parse().map_err(|_| LabelError::BadAuSyntax)?;
        u8::try_from(n)
            .ok()
            .and_then(AuId::from_number)
            .ok_or(LabelError::UnknownAu(n))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Emotion {
    Neutral,
    Anger,
    Disgust,
    Fear,
    Happiness,
    Sadness,
    Surprise,
    Other,
}

impl Emotion {
    pub const ALL: [Emotion; N_EMOTIONS] = [
        Emotion::Neutral,
        Emotion::Anger,
        Emotion::Disgust,
        Emotion::Fear,
        Emotion::Happiness,
        Emotion::Sadness,
        Emotion::Surprise,
        Emotion::Other,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Neutral => "Neutral",
            Emotion::Anger => "Anger",
            Emotion::Disgust => "Disgust",
            Emotion::Fear => "Fear",
            Emotion::Happiness => "Happiness",
            Emotion::Sadness => "Sadness",
            Emotion::Surprise => "Surprise",
            Emotion::Other => "Other",
        }
    }

    /// Action units that typically carry this emotion (used by the fixture
    /// generator and the key-AU caption template).
    pub fn prototype_aus(self) -> &'static [u8] {
        match self {
            Emotion::Neutral => &[],
            Emotion::Anger => &[4, 7, 23, 24],
            Emotion::Disgust => &[4, 10, 15, 25],
            Emotion::Fear => &[1, 2, 4, 7, 25],
            Emotion::Happiness => &[6, 12, 25],
            Emotion::Sadness => &[1, 4, 15],
            Emotion::Surprise => &[1, 2, 25, 26],
            Emotion::Other => &[10, 23],
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Emotion {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Emotion::ALL
            .iter()
            .copied()
            .find(|e| e.name() == s)
            .ok_or(LabelError::UnknownEmotion)
    }
}

/// Binary activation vector over the twelve AUs, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct AuLabels(pub [u8; N_AUS]);

impl AuLabels {
    /// # Errors
    /// [`LabelError::NonBinary`] when an entry is not 0 or 1.
    pub fn new(values: [u8; N_AUS]) -> Result<Self, LabelError> {
        if values.iter().all(|&v| v <= 1) {
            Ok(Self(values))
        } else {
            Err(LabelError::NonBinary)
        }
    }

    pub fn from_active(active: &[u8]) -> Self {
        let mut v = [0u8; N_AUS];
        for &n in active {
            if let Some(id) = AuId::from_number(n) {
                v[id.index()] = 1;
            }
        }
        Self(v)
    }

    #[inline]
    pub fn is_active(&self, au: AuId) -> bool {
        self.0[au.index()] == 1
    }

    pub fn active(&self) -> impl Iterator<Item = AuId> + '_ {
        AuId::all().filter(|&a| self.is_active(a))
    }

    pub fn as_f64(&self) -> [f64; N_AUS] {
        self.0.map(f64::from)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelError {
    UnknownAu(u32),
    BadAuSyntax,
    UnknownEmotion,
    NonBinary,
}

impl fmt::Display for LabelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelError::UnknownAu(n) => write!(f, "AU{n} is not one of the tracked action units"),
            LabelError::BadAuSyntax => f.write_str("action unit must look like AU12 or 12"),
            LabelError::UnknownEmotion => f.write_str("unknown emotion label"),
            LabelError::NonBinary => f.write_str("AU label entries must be 0 or 1"),
        }
    }
}

impl core::error::Error for LabelError {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn au_index_mapping_is_bijective() {
        for (i, &n) in AU_NUMBERS.iter().enumerate() {
            let id = AuId::from_number(n).unwrap();
            assert_eq!(id.index(), i);
            assert_eq!(AuId::from_index(i), Some(id));
            assert_eq!(id.number(), n);
        }
        assert_eq!(AuId::from_number(3), None);
        assert_eq!("AU25".parse::<AuId>().unwrap().number(), 25);
    }

    #[test]
    fn emotion_mapping_is_bijective() {
        for (i, e) in Emotion::ALL.iter().enumerate() {
            assert_eq!(e.index(), i);
            assert_eq!(e.name().parse::<Emotion>().unwrap(), *e);
        }
        assert_eq!("Joy".parse::<Emotion>(), Err(LabelError::UnknownEmotion));
    }

    #[test]
    fn prototype_aus_are_tracked() {
        for e in Emotion::ALL {
            for &n in e.prototype_aus() {
                assert!(AuId::from_number(n).is_some(), "{e}: AU{n}");
            }
        }
    }
}
