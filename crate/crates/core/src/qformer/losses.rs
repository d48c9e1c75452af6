//! Contrastive, matching and generation objectives.

use alloc::rc::Rc;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LossError {
    DegenerateBatch,
    LabelMismatch {
        logits: usize,
        labels: usize,
    },
    EmptyMask,
    /// A generation target pointed at the CLS slot or past the sequence.
    BadTargetPosition(usize),
    BatchTooSmall(usize),
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::DegenerateBatch => {
                f.write_str("contrastive batch has non-finite embeddings")
            }
            LossError::LabelMismatch { logits, labels } => {
                write!(f, "{logits} matching logits but {labels} labels")
            }
            LossError::EmptyMask => f.write_str("generation target set is empty"),
            LossError::BadTargetPosition(p) => {
                write!(f, "generation target at invalid position {p}")
            }
            LossError::BatchTooSmall(m) => {
                write!(f, "negative sampling needs at least 2 pairs, got {m}")
            }
        }
    }
}

impl core::error::Error for LossError {}

/// Softmax temperature: a constant, or a graph scalar when learned.
#[derive(Clone, Copy, Debug)]
pub enum Temperature {
    Fixed(f64),
    Learned(Var),
}

fn scale_by_temperature(g: &mut Graph<'_>, x: Var, tau: Temperature) -> Var {
    match tau {
        Temperature::Fixed(t) => g.scale(x, 1.0 / t),
        Temperature::Learned(t) => {
            let inv = g.recip(t);
            g.mul_scalar(x, inv)
        }
    }
}

fn diagonal(g: &mut Graph<'_>, x: Var) -> Var {
    let (m, _) = g.shape(x);
    let index: Vec<usize> = (0..m).map(|i| i * m + i).collect();
    g.gather(x, Rc::new(index), 1, m)
}

/// Symmetric InfoNCE over `M` matched rows of unit-norm embeddings:
/// `-(1/2M) Σ_i [log softmax_j(v_i·s_j/τ)_i + log softmax_j(s_i·v_j/τ)_i]`.
///
/// # Errors
/// [`LossError::DegenerateBatch`] on non-finite embeddings.
pub fn itc_loss(g: &mut Graph<'_>, v: Var, s: Var, tau: Temperature) -> Result<Var, LossError> {
    assert_eq!(g.shape(v), g.shape(s), "itc embedding shapes differ");
    if !g.value(v).is_finite() || !g.value(s).is_finite() {
        return Err(LossError::DegenerateBatch);
    }
    let m = g.shape(v).0;
    let i2t = g.matmul_t(v, s);
    let i2t = scale_by_temperature(g, i2t, tau);
    let t2i = g.matmul_t(s, v);
    let t2i = scale_by_temperature(g, t2i, tau);
    let a = g.log_softmax(i2t);
    let b = g.log_softmax(t2i);
    let da = diagonal(g, a);
    let db = diagonal(g, b);
    let both = g.concat_cols(&[da, db]);
    let total = g.sum_all(both);
    Ok(g.scale(total, -1.0 / (2.0 * m as f64)))
}

/// Summed binary cross-entropy of matching logits against 0/1 labels.
///
/// # Errors
/// [`LossError::LabelMismatch`] when the counts differ.
pub fn itm_loss(g: &mut Graph<'_>, logits: Var, labels: &[u8]) -> Result<Var, LossError> {
    let n = g.value(logits).len();
    if n != labels.len() {
        return Err(LossError::LabelMismatch {
            logits: n,
            labels: labels.len(),
        });
    }
    Ok(g.bce_with_logits(logits, labels.iter().map(|&y| f64::from(y)).collect()))
}

/// Generation targets: logit row `rows[k]` must predict token `ids[k]`,
/// which sits at sequence position `positions[k]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenTargets {
    pub positions: Vec<usize>,
    pub rows: Vec<usize>,
    pub ids: Vec<u32>,
}

impl TokenTargets {
    /// Predict each masked position from its own output row.
    pub fn masked(positions: Vec<usize>, ids: &[u32]) -> Self {
        let targets = positions.iter().map(|&p| ids[p]).collect();
        Self {
            rows: positions.clone(),
            positions,
            ids: targets,
        }
    }

    /// Predict every token after CLS from the row before it.
    pub fn causal(ids: &[u32], mask: &[u8]) -> Self {
        let positions: Vec<usize> = (1..ids.len()).filter(|&p| mask[p] != 0).collect();
        Self {
            rows: positions.iter().map(|p| p - 1).collect(),
            ids: positions.iter().map(|&p| ids[p]).collect(),
            positions,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Picks generation positions: each non-CLS real token with probability
/// `prob`, and at least one.
pub fn sample_mask_positions(mask: &[u8], prob: f64, r: &mut ChaCha8Rng) -> Vec<usize> {
    let candidates: Vec<usize> = (1..mask.len()).filter(|&p| mask[p] != 0).collect();
    if candidates.is_empty() {
        return Vec::new();
    }
    let mut chosen: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|_| r.gen_bool(prob))
        .collect();
    if chosen.is_empty() {
        chosen.push(candidates[r.gen_range(0..candidates.len())]);
    }
    chosen
}

/// Summed negative log-likelihood of the targets under row-wise softmax of
/// `logits` (`[L, V]`).
///
/// # Errors
/// [`LossError::EmptyMask`] for no targets; [`LossError::BadTargetPosition`]
/// for a target at CLS or outside the sequence.
pub fn itg_loss(g: &mut Graph<'_>, logits: Var, targets: &TokenTargets) -> Result<Var, LossError> {
    if targets.is_empty() {
        return Err(LossError::EmptyMask);
    }
    let (l, v) = g.shape(logits);
    for (&p, &row) in targets.positions.iter().zip(&targets.rows) {
        if p == 0 || p >= l || row >= l {
            return Err(LossError::BadTargetPosition(p));
        }
    }
    let rows = g.select_rows(logits, &targets.rows);
    let lp = g.log_softmax(rows);
    let index: Vec<usize> = targets
        .ids
        .iter()
        .enumerate()
        .map(|(k, &id)| k * v + id as usize)
        .collect();
    let picked = g.gather(lp, Rc::new(index), 1, targets.len());
    let total = g.sum_all(picked);
    Ok(g.scale(total, -1.0))
}

/// One image-text candidate for the matching objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Candidate {
    pub image: usize,
    pub text: usize,
    pub label: u8,
}

/// For each of `m` pairs: the positive, one in-batch negative text and one
/// in-batch negative image, both uniform over the other pairs.
///
/// # Errors
/// [`LossError::BatchTooSmall`] when `m < 2`.
pub fn sample_negatives(m: usize, seed: u64) -> Result<Vec<Candidate>, LossError> {
    if m < 2 {
        return Err(LossError::BatchTooSmall(m));
    }
    let mut r = rng::stream(seed, "itm-negatives");
    let mut other = |i: usize| {
        let k = r.gen_range(0..m - 1);
        if k >= i {
            k + 1
        } else {
            k
        }
    };
    let mut out = Vec::with_capacity(3 * m);
    for i in 0..m {
        out.push(Candidate {
            image: i,
            text: i,
            label: 1,
        });
        let t = other(i);
        out.push(Candidate {
            image: i,
            text: t,
            label: 0,
        });
        let im = other(i);
        out.push(Candidate {
            image: im,
            text: i,
            label: 0,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numerical_gradient, relative_error};
    use crate::params::ParamStore;
    use crate::tensor::Matrix;
    use alloc::vec;

    fn itc_value(v: &Matrix, s: &Matrix, tau: f64) -> f64 {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let v = g.constant(v.clone());
        let s = g.constant(s.clone());
        let l = itc_loss(&mut g, v, s, Temperature::Fixed(tau)).unwrap();
        g.value(l).item()
    }

    #[test]
    fn itc_closed_forms() {
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let expected = libm::log(1.0 + libm::exp(-1.0));
        assert!((itc_value(&e, &e, 1.0) - expected).abs() < 1e-9);
        let one = Matrix::from_rows(&[vec![0.6, 0.8]]);
        assert_eq!(itc_value(&one, &one, 0.07), 0.0);
        let a = itc_value(&e, &e, 1.0);
        let b = itc_value(&e, &e, 0.5);
        let c = itc_value(&e, &e, 0.07);
        assert!(a > b && b > c && c >= 0.0);
    }

    #[test]
    fn itm_closed_forms() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let z = g.constant(Matrix::from_rows(&[vec![0.0], vec![0.0]]));
        let l = itm_loss(&mut g, z, &[1, 0]).unwrap();
        assert!((g.value(l).item() - 2.0 * core::f64::consts::LN_2).abs() < 1e-9);
        assert_eq!(
            itm_loss(&mut g, z, &[1]).unwrap_err(),
            LossError::LabelMismatch {
                logits: 2,
                labels: 1
            }
        );
    }

    #[test]
    fn itg_uniform_logits_cost_log_vocab() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let z = g.constant(Matrix::zeros(3, 10));
        let t = TokenTargets::masked(vec![2], &[1, 4, 7]);
        let l = itg_loss(&mut g, z, &t).unwrap();
        assert!((g.value(l).item() - libm::log(10.0)).abs() < 1e-9);
        let empty = TokenTargets::masked(vec![], &[1, 4, 7]);
        assert_eq!(
            itg_loss(&mut g, z, &empty).unwrap_err(),
            LossError::EmptyMask
        );
        let cls = TokenTargets::masked(vec![0], &[1, 4, 7]);
        assert_eq!(
            itg_loss(&mut g, z, &cls).unwrap_err(),
            LossError::BadTargetPosition(0)
        );
    }

    #[test]
    fn negatives_have_the_right_shape() {
        let c = sample_negatives(2, 9).unwrap();
        assert_eq!(c.len(), 6);
        assert_eq!(c.iter().filter(|c| c.label == 1).count(), 2);
        assert!(c.iter().filter(|c| c.label == 0).all(|c| c.image != c.text));
        assert_eq!(c, sample_negatives(2, 9).unwrap());
        assert_eq!(sample_negatives(1, 0), Err(LossError::BatchTooSmall(1)));
    }

    #[test]
    fn itc_gradient_matches_finite_differences() {
        let v = Matrix::from_rows(&[
            vec![0.3, -0.2, 0.9],
            vec![0.1, 0.7, -0.4],
            vec![-0.5, 0.2, 0.3],
        ]);
        let s = Matrix::from_rows(&[
            vec![0.2, 0.1, 0.8],
            vec![-0.3, 0.6, 0.1],
            vec![0.4, -0.1, 0.5],
        ]);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let vi = g.input(v.clone());
        let si = g.constant(s.clone());
        let l = itc_loss(&mut g, vi, si, Temperature::Fixed(0.5)).unwrap();
        let analytic = g.backward(l).wrt(vi).unwrap().clone();
        let numeric = numerical_gradient(&v, 1e-6, |x| itc_value(x, &s, 0.5));
        assert!(relative_error(&analytic, &numeric) <= 1e-4);
    }
}
