//! AdamW with a linear warm-up schedule.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::params::ParamStore;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Decoupled-weight-decay Adam. Moment buffers are created lazily per
/// parameter; parameters that are frozen or received no gradient are left
/// untouched, bit for bit.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    moments: Vec<Option<(Matrix, Matrix)>>,
    steps: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            moments: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.steps += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - libm::pow(beta1, t as f64);
        let bc2 = 1.0 - libm::pow(beta2, t as f64);
        for (id, grad) in grads.params() {
            if !store.is_trainable(id) {
                continue;
            }
            let slot = &mut self.moments[id.index()];
            let (m, v) = slot.get_or_insert_with(|| {
                let (r, c) = grad.shape();
                (Matrix::zeros(r, c), Matrix::zeros(r, c))
            });
            let p = store.value_mut(id);
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(grad.data());
            for (((p, m), v), &g) in iter {
                *p *= 1.0 - lr * weight_decay;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
    }
}

/// Linear warm-up to a constant base rate. Steps are 1-based: the `s`-th
/// optimizer step uses `base · min(1, s / warmup)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
}

impl WarmupSchedule {
    pub const FULL_WARMUP_STEPS: usize = 2000;

    /// Desk-scale warm-up length: `min(2000, total_steps / 10)`.
    pub fn scaled(base_lr: f64, total_steps: usize) -> Self {
        Self {
            base_lr,
            warmup_steps: Self::FULL_WARMUP_STEPS.min(total_steps / 10),
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.base_lr
        } else {
            self.base_lr * step as f64 / self.warmup_steps as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn warmup_reaches_base_rate() {
        let s = WarmupSchedule {
            base_lr: 1e-4,
            warmup_steps: 2000,
        };
        assert_eq!(s.lr(1000), 1e-4 * 1000.0 / 2000.0);
        assert_eq!(s.lr(2000), 1e-4);
        assert_eq!(s.lr(5000), 1e-4);
        assert_eq!(WarmupSchedule::scaled(1e-4, 30).warmup_steps, 3);
        assert_eq!(WarmupSchedule::scaled(1e-4, 1_000_000).warmup_steps, 2000);
    }

    #[test]
    fn adamw_minimizes_quadratic_and_skips_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let w = store.add("w", 1, 2, Init::Normal(1.0), &mut rng);
        let frozen = store.add("frozen", 1, 2, Init::Normal(1.0), &mut rng);
        store.set_trainable(frozen, false);
        let frozen_before = store.value(frozen).clone();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&store);
                let a = g.param(w);
                let b = g.param(frozen);
                let s = g.add(a, b);
                let sq = g.mul(s, s);
                let loss = g.sum_all(sq);
                g.backward(loss)
            };
            opt.step(&mut store, &grads, 0.05);
        }
        let sum: Vec<f64> = store
            .value(w)
            .data()
            .iter()
            .zip(store.value(frozen).data())
            .map(|(a, b)| a + b)
            .collect();
        assert!(sum.iter().all(|v| v.abs() < 1e-2), "{sum:?}");
        assert_eq!(store.value(frozen), &frozen_before);
    }
}
