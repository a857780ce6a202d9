//! Deterministic counter-based pseudo-random numbers.
//!
//! The generator is SplitMix64 (Steele, Lea & Flood 2014): the state advances
//! by the 64-bit golden-ratio constant and each output is a finalizing hash
//! of the state, so draw `i` from seed `s` equals `mix64(s + (i+1)*GOLDEN)`.
//! It is trivially reproducible in any language, which is what our
//! fixed-seed tests rely on.
//!
//! Derived distributions are pinned here too:
//! - `next_f64` uses the top 53 bits, uniform in `[0, 1)`;
//! - `normal` is a Box-Muller pair computed in f64 (the second value of each
//!   pair is cached);
//! - `poisson` uses Knuth's product-of-uniforms method for mean < 32 and a
//!   rounded, clamped Gaussian approximation above.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 stream with a cached spare Gaussian deviate.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            state: seed,
            spare_normal: None,
        }
    }

    /// Independent stream for a numbered work item (`seed XOR stream` before
    /// mixing); used to parallelize dataset generation deterministically.
    pub fn derive(&self, stream: u64) -> Rng {
        Rng::new(self.state ^ stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[0, 1)` with 24 bits of precision.
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform integer in `[0, n)`.
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal deviate (Box-Muller, f64 internals).
    pub fn normal(&mut self) -> f32 {
        self.normal_f64() as f32
    }

    pub fn normal_f64(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.spare_normal = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    /// Fill a buffer with standard normal deviates.
    pub fn fill_normal(&mut self, out: &mut [f32]) {
        for v in out.iter_mut() {
            *v = self.normal();
        }
    }

    /// Poisson deviate with the given mean.
    pub fn poisson(&mut self, mean: f64) -> u64 {
        if mean <= 0.0 {
            return 0;
        }
        if mean < 32.0 {
            // Knuth: count uniforms until their product drops below e^-mean.
            let limit = libm::exp(-mean);
            let mut k = 0u64;
            let mut p = 1.0;
            loop {
                p *= self.next_f64();
                if p <= limit {
                    return k;
                }
                k += 1;
            }
        }
        // Gaussian approximation, matched mean and variance.
        let z = self.normal_f64();
        let v = libm::round(mean + libm::sqrt(mean) * z);
        v.max(0.0) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_seed_reproduces() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn uniform_range_and_mean() {
        let mut rng = Rng::new(7);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let u = rng.next_f64();
            assert!((0.0..1.0).contains(&u));
            sum += u;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::new(3);
        let n = 200_000;
        let (mut s1, mut s2) = (0.0f64, 0.0f64);
        for _ in 0..n {
            let z = rng.normal_f64();
            s1 += z;
            s2 += z * z;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn poisson_moments_small_and_large_mean() {
        for &(mean, seed) in &[(4.0f64, 11u64), (200.0, 12)] {
            let mut rng = Rng::new(seed);
            let n = 100_000;
            let (mut s1, mut s2) = (0.0f64, 0.0f64);
            for _ in 0..n {
                let k = rng.poisson(mean) as f64;
                s1 += k;
                s2 += k * k;
            }
            let m = s1 / n as f64;
            let v = s2 / n as f64 - m * m;
            // 3 standard errors of the sample mean, plus slack for variance.
            let se = libm::sqrt(mean / n as f64);
            assert!((m - mean).abs() < 3.0 * se + 1e-9, "mean {m} vs {mean}");
            assert!((v - mean).abs() / mean < 0.05, "var {v} vs {mean}");
        }
    }

    #[test]
    fn derived_streams_differ() {
        let base = Rng::new(99);
        let mut a = base.derive(0);
        let mut b = base.derive(1);
        assert_ne!(a.next_u64(), b.next_u64());
    }
}
