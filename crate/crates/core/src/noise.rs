//! Counter-based Gaussian noise streams.
//!
//! Every draw is a pure function of `(seed, slice, step, lane, counter)`, so
//! the noise a slice sees at a given timestep does not depend on which worker
//! owns the slice or on the order blocks are processed in.

use ndarray::Array2;
use num_complex::Complex64;
use std::f64::consts::TAU;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finaliser: a bijective avalanche mix of 64 bits.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Identifies one independent stream of standard normal draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseStream {
    pub seed: u64,
    pub slice: u64,
    pub step: u64,
    pub lane: u64,
    key: u64,
}

impl NoiseStream {
    pub fn new(seed: u64, slice: usize, step: usize, lane: usize) -> Self {
        let (slice, step, lane) = (slice as u64, step as u64, lane as u64);
        let mut key = mix64(seed.wrapping_add(GOLDEN));
        key = mix64(key ^ mix64(slice.wrapping_mul(0xd1b5_4a32_d192_ed03).wrapping_add(1)));
        key = mix64(key ^ mix64(step.wrapping_mul(0xaef1_7502_108e_f2d9).wrapping_add(2)));
        key = mix64(key ^ mix64(lane.wrapping_mul(0x8cb9_2ba7_2f3d_8dd7).wrapping_add(3)));
        Self { seed, slice, step, lane, key }
    }

    #[inline]
    fn bits(&self, counter: u64) -> u64 {
        mix64(self.key ^ mix64(counter.wrapping_mul(GOLDEN).wrapping_add(self.key.rotate_left(17))))
    }

    /// Box-Muller pair number `pair`.
    #[inline]
    fn pair(&self, pair: u64) -> (f64, f64) {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        // u1 in (0, 1] keeps the logarithm finite
        let u1 = ((self.bits(2 * pair) >> 11) + 1) as f64 * SCALE;
        let u2 = (self.bits(2 * pair + 1) >> 11) as f64 * SCALE;
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (TAU * u2).sin_cos();
        (r * c, r * s)
    }

    /// The `index`-th draw of the stream.
    pub fn normal(&self, index: u64) -> f64 {
        let (a, b) = self.pair(index / 2);
        if index.is_multiple_of(2) {
            a
        } else {
            b
        }
    }

    /// Fills `out` with draws `0..out.len()`.
    pub fn fill(&self, out: &mut [f64]) {
        for (p, chunk) in out.chunks_mut(2).enumerate() {
            let (a, b) = self.pair(p as u64);
            chunk[0] = a;
            if let Some(x) = chunk.get_mut(1) {
                *x = b;
            }
        }
    }

    /// An `n x n` field with independent unit-variance real and imaginary
    /// parts, taken from draws `0..2 n^2` (real, imaginary interleaved).
    pub fn complex_field(&self, n: usize) -> Array2<Complex64> {
        let mut draws = vec![0.0; 2 * n * n];
        self.fill(&mut draws);
        Array2::from_shape_fn((n, n), |(i, j)| {
            let k = 2 * (i * n + j);
            Complex64::new(draws[k], draws[k + 1])
        })
    }
}

/// `count` standard normal draws of the stream at `(seed, s, t, l)`.
pub fn derive_noise(seed: u64, s: usize, t: usize, l: usize, count: usize) -> Vec<f64> {
    let mut out = vec![0.0; count];
    NoiseStream::new(seed, s, t, l).fill(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_var(x: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn empty_request() {
        assert!(derive_noise(7, 0, 1, 0, 0).is_empty());
    }

    #[test]
    fn deterministic() {
        assert_eq!(derive_noise(7, 3, 11, 2, 101), derive_noise(7, 3, 11, 2, 101));
    }

    #[test]
    fn prefix_stable_and_random_access() {
        let long = derive_noise(9, 1, 2, 3, 50);
        let short = derive_noise(9, 1, 2, 3, 17);
        assert_eq!(&long[..17], &short[..]);
        let st = NoiseStream::new(9, 1, 2, 3);
        for (i, v) in long.iter().enumerate() {
            assert_eq!(st.normal(i as u64), *v);
        }
    }

    #[test]
    fn million_draws_moments() {
        let x = derive_noise(7, 0, 1, 0, 1_000_000);
        let (m, v) = mean_var(&x);
        assert!(m.abs() < 0.004, "mean {m}");
        assert!((v - 1.0).abs() < 0.01, "variance {v}");
    }

    #[test]
    fn coordinates_give_uncorrelated_streams() {
        let n = 200_000;
        let base = derive_noise(7, 0, 1, 0, n);
        for other in
            [derive_noise(7, 1, 1, 0, n), derive_noise(7, 0, 2, 0, n), derive_noise(7, 0, 1, 1, n), derive_noise(8, 0, 1, 0, n)]
        {
            let c = base.iter().zip(&other).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            // 4 sigma of the sample correlation of independent normals
            assert!(c.abs() < 4.0 / (n as f64).sqrt(), "correlation {c}");
        }
    }
}
