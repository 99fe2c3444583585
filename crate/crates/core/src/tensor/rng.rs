//! Seeded pseudo-random numbers for reproducible initialization and shuffles.

use super::{Scalar, Tensor};

/// SplitMix64 generator. The algorithm is fixed so that a given seed yields
/// the same stream on every platform and build; weight initialization,
/// dataset splitting and the synthetic datasets all depend on that.
///
/// Reference constants are the finalization mix from the public-domain
/// splitmix64 routine.
#[derive(Debug, Clone)]
pub struct SeededRng {
    state: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 random mantissa bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n) by rejection, so every value is equally
    /// likely regardless of n.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Glorot-uniform tensor: entries drawn from
    /// U(-limit, limit) with limit = sqrt(6 / (fan_in + fan_out)).
    pub fn glorot_uniform<T: Scalar>(
        &mut self,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
    ) -> Tensor<T> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_fn(shape, |_| T::from_f64(self.uniform(-limit, limit)))
    }

    /// Uniform tensor in [lo, hi), used by tests for random probe points.
    pub fn uniform_tensor<T: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64(self.uniform(lo, hi)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seeds_identical_streams() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_seeds_differ() {
        let mut a = SeededRng::new(1);
        let mut b = SeededRng::new(2);
        let same = (0..64).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn next_f64_in_unit_interval() {
        let mut rng = SeededRng::new(7);
        for _ in 0..10_000 {
            let v = rng.next_f64();
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn glorot_within_limit() {
        let mut rng = SeededRng::new(3);
        let t: Tensor<f32> = rng.glorot_uniform(&[10, 10], 10, 10);
        let limit = (6.0f32 / 20.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn initializations_bitwise_identical_across_runs() {
        let t1: Tensor<f32> = SeededRng::new(99).glorot_uniform(&[4, 4], 4, 4);
        let t2: Tensor<f32> = SeededRng::new(99).glorot_uniform(&[4, 4], 4, 4);
        assert_eq!(t1.data(), t2.data());
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = SeededRng::new(5);
        let mut v: Vec<u32> = (0..100).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }
}
