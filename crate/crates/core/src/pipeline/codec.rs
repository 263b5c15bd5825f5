//! Toy latent codec: non-overlapping patches and a seeded orthogonal map.

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::TokenMask;
use crate::scalar::Scalar;
use crate::tensor::{matmul, matmul_t, randn};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("image {height}x{width} is not divisible by patch size {patch}")]
    NotDivisible { height: usize, width: usize, patch: usize },
    #[error("expected {expected} channels, got {got}")]
    Channels { expected: usize, got: usize },
    #[error("latent shape {got:?} does not fit a {rows}x{cols} grid of {dim}-channel tokens")]
    LatentShape { got: (usize, usize), rows: usize, cols: usize, dim: usize },
    #[error("mask {height}x{width} is not divisible by token grid {rows}x{cols}")]
    MaskGrid { height: usize, width: usize, rows: usize, cols: usize },
}

/// Patchify-and-rotate codec. Decoding is the exact transpose of encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchCodec<T> {
    patch: usize,
    channels: usize,
    projection: Array2<T>,
}

impl<T: Scalar> PatchCodec<T> {
    pub fn new(patch: usize, channels: usize, seed: u64) -> Self {
        let dim = patch * patch * channels;
        let projection = orthogonal(dim, seed).mapv(T::of);
        Self { patch, channels, projection }
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    /// Channels per latent token.
    pub fn token_dim(&self) -> usize {
        self.projection.nrows()
    }

    /// `(H, W, C)` pixels to `(tokens, patch²·C)` latent, tokens in raster order.
    pub fn encode(&self, pixels: &Array3<T>) -> Result<Array2<T>, CodecError> {
        let (h, w, c) = pixels.dim();
        let p = self.patch;
        if c != self.channels {
            return Err(CodecError::Channels { expected: self.channels, got: c });
        }
        if h % p != 0 || w % p != 0 {
            return Err(CodecError::NotDivisible { height: h, width: w, patch: p });
        }
        let (rows, cols) = (h / p, w / p);
        let patches = Array2::from_shape_fn((rows * cols, self.token_dim()), |(tok, k)| {
            let (py, px, ch) = (k / (p * c), (k / c) % p, k % c);
            pixels[[(tok / cols) * p + py, (tok % cols) * p + px, ch]]
        });
        Ok(matmul(patches.view(), self.projection.view()))
    }

    pub fn decode(&self, latent: &Array2<T>, rows: usize, cols: usize) -> Result<Array3<T>, CodecError> {
        let dim = self.token_dim();
        if latent.dim() != (rows * cols, dim) {
            return Err(CodecError::LatentShape { got: latent.dim(), rows, cols, dim });
        }
        let p = self.patch;
        let c = self.channels;
        let patches = matmul_t(latent.view(), self.projection.view());
        Ok(Array3::from_shape_fn((rows * p, cols * p, c), |(y, x, ch)| {
            let tok = (y / p) * cols + x / p;
            patches[[tok, ((y % p) * p + x % p) * c + ch]]
        }))
    }
}

/// Seeded orthogonal matrix by twice-iterated modified Gram-Schmidt on a Gaussian draw.
fn orthogonal(dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m: Array2<f64> = randn(&mut rng, dim, dim, 1.0);
    for _ in 0..2 {
        for i in 0..dim {
            for j in 0..i {
                let dot = m.row(i).dot(&m.row(j));
                let prev = m.row(j).to_owned();
                m.row_mut(i).scaled_add(-dot, &prev);
            }
            let norm = m.row(i).dot(&m.row(i)).sqrt();
            m.row_mut(i).mapv_inplace(|x| x / norm);
        }
    }
    m
}

/// 8-bit RGB to `[-1, 1]` floats.
pub fn rgb_to_array<T: Scalar>(img: &RgbImage) -> Array3<T> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        T::of(img.get_pixel(x as u32, y as u32)[c] as f64 / 127.5 - 1.0)
    })
}

/// `[-1, 1]` floats to 8-bit RGB, clamped and rounded.
pub fn array_to_rgb<T: Scalar>(pixels: &Array3<T>) -> RgbImage {
    let (h, w, _) = pixels.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let v = (pixels[[y as usize, x as usize, c]].as_f64() + 1.0) * 127.5;
            if v.is_nan() {
                0
            } else {
                v.round().clamp(0.0, 255.0) as u8
            }
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Foreground where the 8-bit value is at least 128.
pub fn gray_to_mask(img: &GrayImage) -> Array2<bool> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0] >= 128)
}

/// A token is foreground when at least half of its pixels are.
pub fn downsample_mask(pixel_mask: &Array2<bool>, rows: usize, cols: usize) -> Result<TokenMask, CodecError> {
    let (h, w) = pixel_mask.dim();
    if rows == 0 || cols == 0 || h % rows != 0 || w % cols != 0 {
        return Err(CodecError::MaskGrid { height: h, width: w, rows, cols });
    }
    let (ch, cw) = (h / rows, w / cols);
    let flags = (0..rows * cols)
        .map(|tok| {
            let (r, c) = (tok / cols, tok % cols);
            let on = pixel_mask
                .slice(ndarray::s![r * ch..(r + 1) * ch, c * cw..(c + 1) * cw])
                .iter()
                .filter(|&&f| f)
                .count();
            2 * on >= ch * cw
        })
        .collect();
    Ok(TokenMask::from_flags(flags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::noise;
    use ndarray::array;

    #[test]
    fn projection_is_orthogonal() {
        let q = orthogonal(12, 3);
        let eye = q.dot(&q.t());
        for ((i, j), v) in eye.indexed_iter() {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let codec = PatchCodec::<f32>::new(4, 3, 5);
        let flat = noise::<f32>(1, 8 * 12, 3);
        let img = Array3::from_shape_fn((8, 12, 3), |(y, x, c)| flat[[y * 12 + x, c]]);
        let z = codec.encode(&img).unwrap();
        assert_eq!(z.dim(), (6, 48));
        let back = codec.decode(&z, 2, 3).unwrap();
        for (a, b) in back.iter().zip(img.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn shapes_and_zero() {
        let codec = PatchCodec::<f64>::new(8, 3, 0);
        let z = codec.encode(&Array3::zeros((64, 64, 3))).unwrap();
        assert_eq!(z.nrows(), 64);
        assert!(z.iter().all(|&v| v == 0.0));
        assert!(matches!(codec.encode(&Array3::zeros((60, 64, 3))), Err(CodecError::NotDivisible { .. })));
        assert!(matches!(codec.encode(&Array3::zeros((64, 64, 1))), Err(CodecError::Channels { .. })));
        assert!(codec.decode(&z, 4, 4).is_err());
    }

    #[test]
    fn mask_examples() {
        let all = Array2::from_elem((8, 8), true);
        assert_eq!(downsample_mask(&all, 2, 2).unwrap(), TokenMask::full(4));
        let none = Array2::from_elem((8, 8), false);
        assert_eq!(downsample_mask(&none, 2, 2).unwrap(), TokenMask::empty(4));
        // cells (row-major): 3, 1, 4, 0 foreground pixels out of 4
        let m = array![
            [true, true, true, false],
            [true, false, false, false],
            [true, true, false, false],
            [true, true, false, false],
        ];
        assert_eq!(m.iter().filter(|&&f| f).count(), 8);
        let tm = downsample_mask(&m, 2, 2).unwrap();
        assert_eq!(tm.flags(), &[true, false, true, false]);
        assert_eq!(tm.count_foreground(), 2);
        // exactly half resolves to foreground
        let half = array![[true, false], [false, true]];
        assert_eq!(downsample_mask(&half, 1, 1).unwrap().flags(), &[true]);
        assert!(downsample_mask(&m, 3, 2).is_err());
    }

    #[test]
    fn pixel_conversion() {
        let img = RgbImage::from_fn(2, 1, |x, _| image::Rgb([if x == 0 { 0 } else { 255 }, 128, 7]));
        let a: Array3<f64> = rgb_to_array(&img);
        assert_eq!(a[[0, 0, 0]], -1.0);
        assert_eq!(a[[0, 1, 0]], 1.0);
        assert_eq!(array_to_rgb(&a), img);
        let g = GrayImage::from_fn(2, 1, |x, _| image::Luma([if x == 0 { 127 } else { 128 }]));
        assert_eq!(gray_to_mask(&g), array![[false, true]]);
    }
}
