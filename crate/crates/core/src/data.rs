//! Counter-based deterministic data.
//!
//! Entry `(row, col)` of a generated matrix depends only on
//! `(seed, stream, row, col)`:
//!
//! ```text
//! h = mix(mix(mix(mix(seed) ^ stream) ^ row) ^ col)
//! x = 2 · (h >> 11) · 2⁻⁵³ − 1            ∈ [−1, 1)
//! ```
//!
//! where `mix` is the SplitMix64 step (add `0x9E3779B97F4A7C15`, then the
//! two xor-shift-multiply rounds with `0xBF58476D1CE4E5B9` and
//! `0x94D049BB133111EB`, then a final `^ (z >> 31)`). All arithmetic is
//! wrapping 64-bit, so the output is identical on every platform.

use crate::numerics::{Matrix, Real};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(z: u64) -> u64 {
    let mut z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Raw 64-bit hash for one entry.
pub fn entry_hash(seed: u64, stream: u64, row: u64, col: u64) -> u64 {
    mix(mix(mix(mix(seed) ^ stream) ^ row) ^ col)
}

/// Uniform value in `[−1, 1)` for one entry.
pub fn uniform(seed: u64, stream: u64, row: u64, col: u64) -> f64 {
    let h = entry_hash(seed, stream, row, col);
    let unit = (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    2.0 * unit - 1.0
}

/// Stream identifiers. A stream is `role << 32 | index`, so every role
/// (queries, keys, weights of layer 3, ...) draws independent values.
pub mod stream {
    pub const QUERY: u64 = 1;
    pub const KEY: u64 = 2;
    pub const VALUE: u64 = 3;
    pub const GRAD_OUT: u64 = 4;
    pub const INPUT: u64 = 5;
    pub const WEIGHT_Q: u64 = 6;
    pub const WEIGHT_K: u64 = 7;
    pub const WEIGHT_V: u64 = 8;
    pub const MATRIX: u64 = 9;

    pub fn id(role: u64, index: u64) -> u64 {
        (role << 32) | (index & 0xFFFF_FFFF)
    }
}

/// `rows × cols` matrix of uniform values in `[−1, 1)`.
pub fn gen_data<T: Real>(seed: u64, stream: u64, rows: usize, cols: usize) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |i, j| {
        <T as Real>::from_f64(uniform(seed, stream, i as u64, j as u64))
    })
}

/// Same as [`gen_data`] with every value multiplied by `scale`.
pub fn gen_scaled<T: Real>(
    seed: u64,
    stream: u64,
    rows: usize,
    cols: usize,
    scale: f64,
) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |i, j| {
        <T as Real>::from_f64(scale * uniform(seed, stream, i as u64, j as u64))
    })
}
