//! Named parameter storage shared by every layer.
//!
//! Layers hold [`ParamId`]s, never tensors. Two layers that hold the same id
//! share weights; that identity is how tied modules are expressed and tested.
//! A store can also be built in shape-only mode, which records names and
//! shapes without allocating values so large configurations can be counted.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    name: String,
    rows: usize,
    cols: usize,
    value: Option<Matrix>,
    trainable: bool,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// # Panics
    /// On a shape-only store.
    pub fn value(&self) -> &Matrix {
        self.value
            .as_ref()
            .expect("parameter values are not materialized in a shape-only store")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
    shape_only: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shape_only() -> Self {
        Self {
            shape_only: true,
            ..Self::default()
        }
    }

    pub fn is_shape_only(&self) -> bool {
        self.shape_only
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// # Panics
    /// If `name` is already registered.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let value = if self.shape_only {
            None
        } else {
            Some(match init {
                Init::Zeros => Matrix::zeros(rows, cols),
                Init::Ones => Matrix::filled(rows, cols, 1.0),
                Init::Constant(c) => Matrix::filled(rows, cols, c),
                Init::Normal(std) => {
                    let data = (0..rows * cols)
                        .map(|_| std * standard_normal(rng))
                        .collect();
                    Matrix::from_vec(rows, cols, data)
                }
            })
        };
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            rows,
            cols,
            value,
            trainable: true,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        self.params[id.0].value()
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        self.params[id.0]
            .value
            .as_mut()
            .expect("parameter values are not materialized in a shape-only store")
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(Param::numel)
            .sum()
    }

    /// Sum of element counts over parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(Param::numel)
            .sum()
    }

    /// SHA-256 over names and raw value bits of the selected parameters.
    pub fn checksum(&self, mut select: impl FnMut(&Param) -> bool) -> String {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| select(p)) {
            hasher.update(p.name.as_bytes());
            hasher.update([0u8]);
            if let Some(v) = &p.value {
                for x in v.data() {
                    hasher.update(x.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Overwrites values of parameters present in `source` under the same
    /// name and shape. Returns the number copied.
    pub fn copy_matching_from(&mut self, source: &ParamStore) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(&sid) = source.by_name.get(&p.name) {
                let sp = &source.params[sid.0];
                if sp.shape() == (p.rows, p.cols) {
                    if let (Some(dst), Some(src)) = (p.value.as_mut(), sp.value.as_ref()) {
                        dst.clone_from(src);
                        copied += 1;
                    }
                }
            }
        }
        copied
    }
}

/// Box–Muller standard normal draw.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn shape_only_store_counts_without_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::shape_only();
        s.add("a", 768, 768, Init::Normal(0.02), &mut rng);
        s.add("b", 1, 768, Init::Zeros, &mut rng);
        assert_eq!(s.total_count(), 768 * 768 + 768);
        assert!(s.get(ParamId(0)).value.is_none());
    }

    #[test]
    fn checksum_tracks_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let id = s.add("w", 2, 2, Init::Normal(1.0), &mut rng);
        let before = s.checksum(|_| true);
        assert_eq!(before, s.checksum(|_| true));
        s.value_mut(id).data_mut()[0] += 1e-12;
        assert_ne!(before, s.checksum(|_| true));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.add("w", 1, 1, Init::Zeros, &mut rng);
        s.add("w", 1, 1, Init::Zeros, &mut rng);
    }
}
