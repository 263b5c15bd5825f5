#![allow(dead_code)]

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refshare_core::attention::StreamQkv;

pub type Rows = Vec<Vec<f64>>;

/// Two-loop softmax attention: for every query, weights over every key.
pub fn oracle_attend(q: &Rows, k: &Rows, v: &Rows) -> Rows {
    let d = q.first().map_or(1, |r| r.len()) as f64;
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> =
                k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = w.iter().sum();
            let dv = v.first().map_or(0, |r| r.len());
            let mut out = vec![0.0; dv];
            for (wj, vj) in w.iter().zip(v) {
                for c in 0..dv {
                    out[c] += wj / z * vj[c];
                }
            }
            out
        })
        .collect()
}

pub fn head_rows(a: &Array3<f64>, h: usize) -> Rows {
    (0..a.dim().1).map(|i| (0..a.dim().2).map(|d| a[[h, i, d]]).collect()).collect()
}

pub fn scale(rows: &Rows, s: f64) -> Rows {
    rows.iter().map(|r| r.iter().map(|x| x * s).collect()).collect()
}

pub fn cat(parts: &[Rows]) -> Rows {
    parts.iter().flat_map(|p| p.iter().cloned()).collect()
}

pub fn max_abs_diff(a: &Rows, b: &Rows) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max)
}

pub fn rand3(rng: &mut ChaCha8Rng, h: usize, n: usize, d: usize) -> Array3<f64> {
    Array3::from_shape_simple_fn((h, n, d), || rng.random_range(-2.0..2.0))
}

pub fn rand_stream(rng: &mut ChaCha8Rng, h: usize, n: usize, dk: usize, dv: usize) -> StreamQkv<f64> {
    StreamQkv { q: rand3(rng, h, n, dk), k: rand3(rng, h, n, dk), v: rand3(rng, h, n, dv) }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
