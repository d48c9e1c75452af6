use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use super::{EncoderConfig, EncoderError, ImageEncoder, VisualFeatureMap};
use crate::autograd::{Graph, Var};
use crate::data::image::{Image, CHANNELS};
use crate::nn::{Builder, EncoderBlock, LayerNorm, Linear, INIT_STD};
use crate::params::{Init, ParamId};
use crate::tensor::Matrix;

/// Patch embedding, CLS token, learned positions, pre-norm blocks.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub ln_out: LayerNorm,
    image_size: usize,
    patch_size: usize,
}

impl VisualEncoder {
    /// # Panics
    /// If the patch size does not tile the image.
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: &EncoderConfig) -> Self {
        assert!(
            cfg.patch_size > 0 && cfg.image_size % cfg.patch_size == 0,
            "patch size {} does not tile image size {}",
            cfg.patch_size,
            cfg.image_size
        );
        let d = cfg.embed_dim;
        let patch_dim = cfg.patch_size * cfg.patch_size * CHANNELS;
        Self {
            patch_embed: Linear::new(b, &format!("{name}.patch_embed"), patch_dim, d),
            cls: b.add(&format!("{name}.cls"), 1, d, Init::Normal(INIT_STD)),
            pos: b.add(
                &format!("{name}.pos"),
                cfg.n_patches() + 1,
                d,
                Init::Normal(INIT_STD),
            ),
            blocks: (0..cfg.vit_depth)
                .map(|i| {
                    EncoderBlock::new(b, &format!("{name}.block{i}"), d, cfg.n_heads, cfg.ffn_dim)
                })
                .collect(),
            ln_out: LayerNorm::new(b, &format!("{name}.ln_out"), d),
            image_size: cfg.image_size,
            patch_size: cfg.patch_size,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        let n = self.image_size / self.patch_size;
        (n, n)
    }

    /// Encodes a `[1, S*S*3]` pixel row in `[0, 1]` already on the graph,
    /// rescaled to `[-1, 1]` before patch embedding. Lets
    /// callers differentiate with respect to pixels.
    pub fn encode_pixels(&self, g: &mut Graph<'_>, pixels: Var) -> VisualFeatureMap {
        let (s, p) = (self.image_size, self.patch_size);
        let grid = self.grid();
        let n_patches = grid.0 * grid.1;
        let index = Rc::new(Image::patch_index(s, s, p));
        let width = g.shape(pixels).1;
        let centered = g.scale(pixels, 2.0);
        let shift = g.constant(Matrix::from_vec(1, width, alloc::vec![-1.0; width]));
        let pixels = g.add(centered, shift);
        let patches = g.gather(pixels, index, n_patches, p * p * CHANNELS);
        let emb = self.patch_embed.forward(g, patches);
        let cls = g.param(self.cls);
        let x = g.concat_rows(&[cls, emb]);
        let pos = g.param(self.pos);
        let mut x = g.add(x, pos);
        for block in &self.blocks {
            x = block.forward(g, x, None);
        }
        let tokens = self.ln_out.forward(g, x);
        VisualFeatureMap {
            tokens,
            grid,
            patch_size: p,
        }
    }
}

impl ImageEncoder for VisualEncoder {
    fn encode_image(
        &self,
        g: &mut Graph<'_>,
        image: &Image,
    ) -> Result<VisualFeatureMap, EncoderError> {
        let expected = (self.image_size, self.image_size);
        let got = (image.height(), image.width());
        if got != expected {
            return Err(EncoderError::ShapeMismatch { expected, got });
        }
        let pixels = g.constant(image.as_row());
        Ok(self.encode_pixels(g, pixels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numerical_gradient, relative_error};
    use crate::params::ParamStore;
    use crate::rng;
    use crate::tensor::Matrix;
    use rand::Rng;

    fn build(cfg: &EncoderConfig) -> (ParamStore, VisualEncoder) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(1, "vit");
        let enc = VisualEncoder::new(&mut Builder::new(&mut store, &mut r), "vit", cfg);
        (store, enc)
    }

    fn toy(image_size: usize, patch_size: usize, d: usize) -> EncoderConfig {
        EncoderConfig {
            image_size,
            patch_size,
            embed_dim: d,
            vit_depth: 1,
            n_heads: 2,
            ffn_dim: 2 * d,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn token_counts_follow_the_grid() {
        let (store, enc) = build(&toy(32, 8, 8));
        let mut g = Graph::new(&store);
        let fm = enc.encode_image(&mut g, &Image::zeros(32, 32)).unwrap();
        assert_eq!(g.shape(fm.tokens), (17, 8));
        assert_eq!(fm.grid, (4, 4));
    }

    #[test]
    fn wrong_image_shape_is_rejected() {
        let (store, enc) = build(&toy(32, 8, 8));
        let mut g = Graph::new(&store);
        let err = enc.encode_image(&mut g, &Image::zeros(24, 32)).unwrap_err();
        assert!(matches!(err, EncoderError::ShapeMismatch { .. }));
    }

    #[test]
    fn pixel_gradient_matches_finite_differences() {
        let (store, enc) = build(&toy(8, 4, 4));
        let mut r = rng::stream(2, "pixels");
        let x = Matrix::row_vector((0..8 * 8 * 3).map(|_| r.gen_range(0.0..1.0)).collect());
        let w = Matrix::from_vec(5, 4, (0..20).map(|_| r.gen_range(-1.0..1.0)).collect());
        let loss = |x: &Matrix| {
            let mut g = Graph::new(&store);
            let px = g.constant(x.clone());
            let fm = enc.encode_pixels(&mut g, px);
            g.value(fm.tokens)
                .data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut g = Graph::new(&store);
        let px = g.input(x.clone());
        let fm = enc.encode_pixels(&mut g, px);
        let wv = g.constant(w.clone());
        let weighted = g.mul(fm.tokens, wv);
        let l = g.sum_all(weighted);
        let grads = g.backward(l);
        let analytic = grads.wrt(px).unwrap().clone();
        let numeric = numerical_gradient(&x, 1e-5, loss);
        let err = relative_error(&analytic, &numeric);
        assert!(err <= 1e-4, "relative error {err}");
    }
}
