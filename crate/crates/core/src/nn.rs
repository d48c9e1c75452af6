//! Transformer building blocks expressed over [`Graph`] and [`ParamStore`].

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{AttnMask, Graph, Var};
use crate::params::{Init, ParamId, ParamStore};

/// Standard deviation of embedding tables, tokens and positions.
pub const INIT_STD: f64 = 0.02;

/// Normal init scaled so a unit-variance input gives unit-variance output.
pub fn fan_in(in_dim: usize) -> Init {
    Init::Normal(1.0 / libm::sqrt(in_dim.max(1) as f64))
}

/// Parameter registration context: a store, an RNG and a name prefix.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng }
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        self.store.add(name, rows, cols, init, self.rng)
    }
}

/// `y = x · W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights drawn with standard deviation `1 / sqrt(in_dim)`, zero bias.
    pub fn new(b: &mut Builder<'_>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::with_init(b, name, in_dim, out_dim, fan_in(in_dim), true)
    }

    pub fn with_init(
        b: &mut Builder<'_>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        bias: bool,
    ) -> Self {
        let weight = b.add(&format!("{name}.weight"), in_dim, out_dim, init);
        let bias = bias.then(|| b.add(&format!("{name}.bias"), 1, out_dim, Init::Zeros));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = alloc::vec![self.weight];
        ids.extend(self.bias);
        ids
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize) -> Self {
        Self {
            gain: b.add(&format!("{name}.gain"), 1, dim, Init::Ones),
            bias: b.add(&format!("{name}.bias"), 1, dim, Init::Zeros),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        alloc::vec![self.gain, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub n_heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    /// # Panics
    /// If `dim` is not divisible by `n_heads`.
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, kv_dim: usize, n_heads: usize) -> Self {
        assert!(
            n_heads > 0 && dim % n_heads == 0,
            "dim {dim} not divisible by {n_heads} heads"
        );
        Self {
            query: Linear::new(b, &format!("{name}.query"), dim, dim),
            key: Linear::new(b, &format!("{name}.key"), kv_dim, dim),
            value: Linear::new(b, &format!("{name}.value"), kv_dim, dim),
            out: Linear::new(b, &format!("{name}.out"), dim, dim),
            n_heads,
            dim,
        }
    }

    /// Attention of `x` rows over `context` rows. `mask` is `[x rows, context rows]`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        context: Var,
        mask: Option<Rc<AttnMask>>,
    ) -> Var {
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, context);
        let v = self.value.forward(g, context);
        let head_dim = self.dim / self.n_heads;
        let scale = 1.0 / libm::sqrt(head_dim as f64);
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (qh, kh, vh) = if self.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * head_dim, head_dim),
                    g.slice_cols(k, h * head_dim, head_dim),
                    g.slice_cols(v, h * head_dim, head_dim),
                )
            };
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let probs = g.softmax(scores, mask.clone());
            heads.push(g.matmul(probs, vh));
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        self.out.forward(g, merged)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value, &self.out]
            .iter()
            .flat_map(|l| l.param_ids())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(b, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(b, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.fc1.param_ids();
        ids.extend(self.fc2.param_ids());
        ids
    }
}

/// Pre-norm transformer encoder block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        dim: usize,
        n_heads: usize,
        ffn_dim: usize,
    ) -> Self {
        Self {
            ln_attn: LayerNorm::new(b, &format!("{name}.ln_attn"), dim),
            attn: MultiHeadAttention::new(b, &format!("{name}.attn"), dim, dim, n_heads),
            ln_ffn: LayerNorm::new(b, &format!("{name}.ln_ffn"), dim),
            ffn: FeedForward::new(b, &format!("{name}.ffn"), dim, ffn_dim),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, mask: Option<Rc<AttnMask>>) -> Var {
        let h = self.ln_attn.forward(g, x);
        let a = self.attn.forward(g, h, h, mask);
        let x = g.add(x, a);
        let h = self.ln_ffn.forward(g, x);
        let f = self.ffn.forward(g, h);
        g.add(x, f)
    }
}
