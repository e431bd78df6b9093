//! Deterministic counter-based PRNG.
//!
//! The generator is fixed so that any port can reproduce streams exactly:
//!
//! * The raw stream is SplitMix64 applied to a counter. Draw `i` (0-based)
//!   of seed `s` is `mix64(s.wrapping_add((i+1) * 0x9E3779B97F4A7C15))` with
//!   `mix64(z) = { z ^= z>>30; z *= 0xBF58476D1CE4E5B9; z ^= z>>27;
//!   z *= 0x94D049BB133111EB; z ^= z>>31; z }` (all arithmetic mod 2^64).
//! * `uniform` maps the top 24 bits to `f32` in [0,1): `(x >> 40) / 2^24`,
//!   computed in `f64` and then cast to the requested precision, so `f32`
//!   and `f64` streams agree to `f32` rounding.
//! * `normal` is the Box–Muller transform on consecutive pairs of uniforms,
//!   with `u1` shifted to (0,1]: `sqrt(-2 ln u1) * (cos, sin)(2*pi*u2)`.
//!   Draws are consumed pairwise; a generated partner value is cached for
//!   the next call.
//!
//! Substreams for independent purposes (shuffling, dropout per step, init
//! per parameter) are derived by hashing labels into a new seed with
//! [`Rng::derive`], never by sharing one long stream, so checkpoint resume
//! reproduces the exact remaining stream.

use crate::tensor::{Scalar, Tensor};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

/// Counter-based generator: `(seed, counter) -> u64`.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    counter: u64,
    cached_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0, cached_normal: None }
    }

    /// A new generator whose seed mixes `self.seed` with a label and index.
    /// Used to give every purpose (init, shuffle@epoch, dropout@step) its
    /// own independent, position-free stream.
    pub fn derive(&self, label: &str, index: u64) -> Rng {
        let mut h = self.seed;
        for &b in label.as_bytes() {
            h = mix64(h ^ (b as u64));
        }
        Rng::new(mix64(h ^ index.wrapping_mul(GOLDEN)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0,1) with 24 bits of resolution.
    pub fn uniform_f64(&mut self) -> f64 {
        ((self.next_u64() >> 40) as f64) / (1u64 << 24) as f64
    }

    /// Standard normal via Box–Muller; one value per call, pair-cached.
    pub fn normal_f64(&mut self) -> f64 {
        if let Some(v) = self.cached_normal.take() {
            return v;
        }
        // u1 in (0,1] so the log is finite.
        let u1 = (((self.next_u64() >> 40) + 1) as f64) / (1u64 << 24) as f64;
        let u2 = self.uniform_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform_f64()
    }

    /// Integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Map the 24-bit uniform; fine for desk-scale n.
        (self.uniform_f64() * n as f64) as usize % n
    }

    /// Fisher–Yates shuffle with this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn tensor_uniform<T: Scalar>(&mut self, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<T> {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64(self.uniform_range(lo, hi)))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn tensor_normal<T: Scalar>(&mut self, shape: Vec<usize>, mean: f64, std: f64) -> Tensor<T> {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64(mean + std * self.normal_f64()))
            .collect();
        Tensor::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let ta: Tensor<f32> = Rng::new(7).tensor_normal(vec![3, 5], 0.0, 1.0);
        let tb: Tensor<f32> = Rng::new(7).tensor_normal(vec![3, 5], 0.0, 1.0);
        assert_eq!(ta.data(), tb.data());
    }

    #[test]
    fn derive_changes_stream() {
        let base = Rng::new(42);
        let mut a = base.derive("dropout", 0);
        let mut b = base.derive("dropout", 1);
        let mut c = base.derive("shuffle", 0);
        let (x, y, z) = (a.next_u64(), b.next_u64(), c.next_u64());
        assert_ne!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn uniform_mean_near_half() {
        let mut rng = Rng::new(123);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| rng.uniform_f64()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn normal_variance_near_one() {
        let mut rng = Rng::new(456);
        let n = 100_000;
        let samples: Vec<f64> = (0..n).map(|_| rng.normal_f64()).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!((var - 1.0).abs() < 0.03, "var {var}");
        assert!(mean.abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut v: Vec<usize> = (0..50).collect();
        Rng::new(9).shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, (0..50).collect::<Vec<_>>());
    }
}
