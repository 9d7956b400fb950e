//! Seeded random number generation.
//!
//! Everything stochastic in this crate flows through [`SeededRng`]: a ChaCha8
//! stream generator with a Box-Muller transform on top. Both pieces are pure
//! integer/float arithmetic, so the same seed yields the same stream on every
//! platform, bit for bit.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Deterministic random source. Not shareable between pipelines; each run owns one.
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
    /// Box-Muller produces pairs; the spare half is cached here.
    cached_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            cached_normal: None,
        }
    }

    /// Derive an independent stream, e.g. one per image in a worker pool.
    /// Mixing is via SplitMix64 so nearby (seed, id) pairs decorrelate.
    pub fn derive(seed: u64, stream_id: u64) -> Self {
        let mut z = seed ^ stream_id.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        SeededRng::new(z)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        // 53 significant bits; offset by half an ulp to exclude 0.
        ((self.inner.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0)
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: u64) -> u64 {
        // Modulo bias is < 2^-40 for any n this crate uses.
        self.next_u64() % n
    }

    /// Standard normal draw via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.normal();
        }
    }

    /// i.i.d. N(0,1) draws of the requested length.
    pub fn normal_vec(&mut self, len: usize) -> Vec<f64> {
        let mut v = vec![0.0; len];
        self.fill_normal(&mut v);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        let va = a.normal_vec(256);
        let vb = b.normal_vec(256);
        assert_eq!(va, vb);
    }

    #[test]
    fn distinct_seeds_differ() {
        let mut a = SeededRng::new(1);
        let mut b = SeededRng::new(2);
        let va = a.normal_vec(16);
        let vb = b.normal_vec(16);
        assert!(va.iter().zip(&vb).any(|(x, y)| x != y));
    }

    #[test]
    fn normal_moments() {
        let mut rng = SeededRng::new(7);
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let z = rng.normal();
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn derived_streams_decorrelate() {
        let a = SeededRng::derive(99, 0).normal_vec_helper();
        let b = SeededRng::derive(99, 1).normal_vec_helper();
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
    }

    impl SeededRng {
        fn normal_vec_helper(mut self) -> Vec<f64> {
            self.normal_vec(32)
        }
    }
}
