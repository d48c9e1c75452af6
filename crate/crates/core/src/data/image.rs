use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Matrix;

pub const CHANNELS: usize = 3;

/// RGB image with `f64` samples in `[0, 1]`, stored height-width-channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
        }
    }

    /// # Panics
    /// If `data` does not hold `height * width * 3` samples.
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            height * width * CHANNELS,
            "image buffer size mismatch"
        );
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Self {
        Self::from_vec(
            height,
            width,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| libm::round(v.clamp(0.0, 1.0) * 255.0) as u8)
            .collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * CHANNELS + c] = v;
    }

    /// Flat index permutation mapping patch-matrix entries to image samples.
    /// Row `gy * gw + gx` holds patch `(gy, gx)` flattened as `(dy, dx, c)`.
    pub fn patch_index(height: usize, width: usize, patch: usize) -> Vec<usize> {
        let (gh, gw) = (height / patch, width / patch);
        let mut idx = Vec::with_capacity(gh * gw * patch * patch * CHANNELS);
        for gy in 0..gh {
            for gx in 0..gw {
                for dy in 0..patch {
                    for dx in 0..patch {
                        let (y, x) = (gy * patch + dy, gx * patch + dx);
                        for c in 0..CHANNELS {
                            idx.push((y * width + x) * CHANNELS + c);
                        }
                    }
                }
            }
        }
        idx
    }

    /// The image as a `[1, H*W*3]` row, the layout [`Image::patch_index`]
    /// indexes into.
    pub fn as_row(&self) -> Matrix {
        Matrix::row_vector(self.data.clone())
    }
}
