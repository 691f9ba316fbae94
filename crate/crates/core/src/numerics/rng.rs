//! Seeded random stream.
//!
//! Backed by ChaCha with 8 rounds (`rand_chacha::ChaCha8Rng`), whose output
//! is specified independently of platform and word size. Seeds expand through
//! `SeedableRng::seed_from_u64` (a PCG32 expansion, also portable). Gaussian
//! draws use the Box–Muller transform on two uniforms so the stream contract
//! depends on nothing beyond the ChaCha word sequence.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::ValueGrid;

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream identified by `stream`; does not advance `self`.
    pub fn fork(&self, stream: u64) -> Rng {
        // splitmix64 finalizer decorrelates nearby (seed, stream) pairs
        let mut z = self
            .seed
            .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .wrapping_add(0x6A09_E667_F3BC_C909);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Rng::new(z ^ (z >> 31))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.gen_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1]
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn normal_grid(&mut self, rows: usize, cols: usize, std: f64) -> ValueGrid {
        ValueGrid::from_fn(rows, cols, |_, _| std * self.normal())
    }

    pub fn uniform_grid(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> ValueGrid {
        ValueGrid::from_fn(rows, cols, |_, _| self.uniform_range(lo, hi))
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Index drawn from unnormalized non-negative weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut target = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if target < w {
                return i;
            }
            target -= w;
        }
        // rounding left target at the upper edge: last positive weight
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        let xs: Vec<u64> = (0..64).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..64).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_ne!(Rng::new(43).next_u64(), xs[0]);
    }

    #[test]
    fn stream_is_pinned() {
        // frozen words; a dependency bump that changes the stream fails here
        let mut r = Rng::new(7);
        assert_eq!(r.next_u64(), 2_910_824_217_569_608_635);
        assert_eq!(r.next_u64(), 3_098_856_782_162_503_994);
    }

    #[test]
    fn forks_are_distinct_and_stable() {
        let base = Rng::new(1);
        assert_eq!(base.fork(3).next_u64(), base.fork(3).next_u64());
        assert_ne!(base.fork(3).next_u64(), base.fork(4).next_u64());
    }

    #[test]
    fn normal_moments() {
        let mut r = Rng::new(9);
        let n = 50_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((var - 1.0).abs() < 0.03, "{var}");
    }

    #[test]
    fn categorical_respects_zero_weights() {
        let mut r = Rng::new(3);
        for _ in 0..1000 {
            let k = r.categorical(&[0.0, 1.0, 0.0, 2.0]);
            assert!(k == 1 || k == 3);
        }
    }
}
