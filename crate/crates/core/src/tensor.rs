//! Small dense helpers on top of `ndarray`.
//!
//! Matrix products are plain loops in a fixed summation order so results are
//! bit-reproducible across machines (no runtime SIMD or FMA dispatch).

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

/// `a · b` for row-major matrices.
pub fn matmul<T: Scalar>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Array2<T> {
    let (n, k) = a.dim();
    let (k2, m) = b.dim();
    assert_eq!(k, k2, "matmul inner dimensions differ");
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let (a, b) = (a.as_slice().unwrap(), b.as_slice().unwrap());
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Array2::from_shape_vec((n, m), out).unwrap()
}

/// `a · bᵀ`.
pub fn matmul_t<T: Scalar>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Array2<T> {
    let (n, k) = a.dim();
    let (m, k2) = b.dim();
    assert_eq!(k, k2, "matmul_t inner dimensions differ");
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let (a, b) = (a.as_slice().unwrap(), b.as_slice().unwrap());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out.push(acc);
        }
    }
    Array2::from_shape_vec((n, m), out).unwrap()
}

/// Seeded standard-normal matrix scaled by `std`.
pub fn randn<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let x: f64 = StandardNormal.sample(rng);
        T::of(x * std)
    })
}

/// Standard-normal latent drawn from a fresh generator seeded with `seed`.
pub fn noise<T: Scalar>(seed: u64, rows: usize, cols: usize) -> Array2<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    randn(&mut rng, rows, cols, 1.0)
}

/// Row-wise RMS normalisation without learned gain.
pub fn rms_norm<T: Scalar>(x: ArrayView2<'_, T>) -> Array2<T> {
    let eps = T::of(1e-6);
    let cols = T::of(x.ncols() as f64);
    let mut out = x.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let ms = row.iter().map(|&v| v * v).sum::<T>() / cols;
        let inv = T::one() / (ms + eps).sqrt();
        row.mapv_inplace(|v| v * inv);
    }
    out
}

/// tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + T::of(0.044715) * x * x * x)).tanh())
}

/// SHA-256 over the little-endian `f64` widening of every element, in order.
pub fn checksum<'a, T: Scalar>(values: impl IntoIterator<Item = &'a T>) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.as_f64().to_le_bytes());
    }
    hex(&hasher.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_matches_hand_product() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let b = array![[5.0, 6.0], [7.0, 8.0]];
        assert_eq!(matmul(a.view(), b.view()), array![[19.0, 22.0], [43.0, 50.0]]);
        assert_eq!(matmul_t(a.view(), b.view()), array![[17.0, 23.0], [39.0, 53.0]]);
    }

    #[test]
    fn noise_is_seeded() {
        let a = noise::<f32>(3, 4, 5);
        let b = noise::<f32>(3, 4, 5);
        let c = noise::<f32>(4, 4, 5);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rms_norm_unit_rms() {
        let x = array![[3.0f64, 4.0], [0.0, 2.0]];
        let y = rms_norm(x.view());
        for row in y.rows() {
            let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / 2.0;
            assert!((ms - 1.0).abs() < 1e-5);
        }
    }
}
