//! Counter-based random streams for reproducible parallel Monte Carlo.
//!
//! Every stochastic quantity in the simulator is drawn from a [`Stream`]
//! addressed by a hierarchy of integer labels (sweep point, sample, trial,
//! layer, output row, output column). A stream is a splitmix64 sequence:
//! the `n`-th output is `mix64(key + n·γ)`, so streams are O(1) to derive,
//! carry no shared state, and produce identical values regardless of how
//! work is scheduled across threads.
//!
//! The sampling algorithms are frozen so that a seed pins an exact output
//! sequence:
//!
//! * uniforms: top 53 bits of `next_u64`, scaled by 2⁻⁵³;
//! * standard normals: Box–Muller (trigonometric form), consuming exactly
//!   two uniforms per draw and returning the cosine branch;
//! * Poisson: sequential inversion for mean < 10, Hörmann's PTRS
//!   transformed rejection for mean ≥ 10.
//!
//! Changing any of these would silently re-randomize archived results, so
//! they are implemented here rather than taken from a distributions crate
//! whose internals may move between versions.

use std::f64::consts::PI;

/// Weyl increment for the splitmix64 state walk (golden ratio in 2⁻⁶⁴ units).
const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// Salt mixed into child keys so `fork(0)` differs from the parent stream.
const FORK_SALT: u64 = 0xd6e8_feb8_6659_fd93;

/// splitmix64 finalizer: bijective avalanche mix of a 64-bit word.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// ln(k!) for k = 0..=9; larger k uses a Stirling series.
const LN_FACTORIAL_SMALL: [f64; 10] = [
    0.0,
    0.0,
    0.693147180559945309,
    1.791759469228055001,
    3.178053830347945620,
    4.787491742782045994,
    6.579251212010100995,
    8.525161361065414300,
    10.604602902745250228,
    12.801827480081469611,
];

/// ln(k!) accurate to ~1e-12 for all k ≥ 0 reachable by the Poisson sampler.
fn ln_factorial(k: f64) -> f64 {
    if k < 10.0 {
        return LN_FACTORIAL_SMALL[k as usize];
    }
    // Stirling series with three correction terms.
    let inv = 1.0 / k;
    let inv2 = inv * inv;
    (k + 0.5) * k.ln() - k
        + 0.5 * (2.0 * PI).ln()
        + inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 / 1260.0))
}

/// A deterministic, forkable random stream.
///
/// Streams form a tree: `Stream::new(seed)` is the root, and
/// [`Stream::fork`] derives an independent child keyed by an integer label.
/// Drawing from a parent does not perturb its children and vice versa.
#[derive(Debug, Clone)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    /// Root stream for a master seed.
    pub fn new(seed: u64) -> Self {
        Stream {
            key: mix64(seed),
            counter: 0,
        }
    }

    /// Derive the child stream with the given label. Deterministic and
    /// side-effect free: forking does not consume parent state.
    #[inline]
    pub fn fork(&self, label: u64) -> Stream {
        Stream {
            key: mix64(self.key ^ mix64(label.wrapping_add(FORK_SALT))),
            counter: 0,
        }
    }

    /// Child stream for a (row, column) pair; `fork2(i, 0)` is the
    /// convention for vector entries so matrix and vector ops that compute
    /// the same product consume identical draws.
    #[inline]
    pub fn fork2(&self, i: u64, j: u64) -> Stream {
        self.fork(i).fork(j)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform on [0, 1) with 53-bit resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on (0, 1]; safe to pass through `ln`.
    #[inline]
    fn uniform_pos(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw. Box–Muller, cosine branch only: exactly two
    /// uniforms per call, no cached spare (consumption must not depend on
    /// call parity).
    pub fn normal(&mut self) -> f64 {
        let r = (-2.0 * self.uniform_pos().ln()).sqrt();
        let theta = 2.0 * PI * self.uniform();
        r * theta.cos()
    }

    /// Poisson draw with the given mean, returned as a float count.
    ///
    /// mean < 10 uses sequential inversion (CDF walk); mean ≥ 10 uses
    /// Hörmann's PTRS transformed-rejection sampler. The cutover point is
    /// part of the reproducibility contract.
    pub fn poisson(&mut self, mean: f64) -> f64 {
        debug_assert!(mean.is_finite() && mean >= 0.0, "Poisson mean {mean}");
        if mean == 0.0 {
            return 0.0;
        }
        if mean < 10.0 {
            self.poisson_inversion(mean)
        } else {
            self.poisson_ptrs(mean)
        }
    }

    fn poisson_inversion(&mut self, mean: f64) -> f64 {
        let mut p = (-mean).exp();
        let mut cdf = p;
        let mut k = 0.0f64;
        let u = self.uniform();
        while u > cdf {
            k += 1.0;
            p *= mean / k;
            cdf += p;
            // Guard against u landing in the far tail where p underflows.
            if p < 1e-300 && k > mean {
                break;
            }
        }
        k
    }

    /// PTRS: transformed rejection with squeeze (Hörmann 1993).
    fn poisson_ptrs(&mut self, mean: f64) -> f64 {
        let slam = mean.sqrt();
        let loglam = mean.ln();
        let b = 0.931 + 2.53 * slam;
        let a = -0.059 + 0.02483 * b;
        let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
        let v_r = 0.9277 - 3.6224 / (b - 2.0);

        loop {
            let mut u;
            let mut v = self.uniform();
            if v <= 0.86 * v_r {
                // Squeeze: accept without evaluating the density.
                u = v / v_r - 0.43;
                return ((2.0 * a / (0.5 - u.abs()) + b) * u + mean + 0.445).floor();
            }
            if v >= v_r {
                u = self.uniform() - 0.5;
            } else {
                u = v / v_r - 0.93;
                u = u.signum() * 0.5 - u;
                v = self.uniform() * v_r;
            }
            let us = 0.5 - u.abs();
            if us < 0.013 && v > us {
                continue;
            }
            let k = ((2.0 * a / us + b) * u + mean + 0.445).floor();
            v = v * inv_alpha / (a / (us * us) + b);
            if k >= 0.0 && v.ln() <= k * loglam - mean - ln_factorial(k) {
                return k;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, DiscreteCDF, Normal, Poisson};

    #[test]
    fn streams_are_reproducible() {
        let mut a = Stream::new(7).fork(3).fork2(1, 2);
        let mut b = Stream::new(7).fork(3).fork2(1, 2);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn forks_are_independent_of_parent_draws() {
        let mut parent = Stream::new(42);
        let before: Vec<u64> = {
            let mut c = parent.fork(5);
            (0..10).map(|_| c.next_u64()).collect()
        };
        parent.next_u64();
        parent.next_u64();
        let after: Vec<u64> = {
            let mut c = parent.fork(5);
            (0..10).map(|_| c.next_u64()).collect()
        };
        assert_eq!(before, after);
    }

    #[test]
    fn sibling_forks_differ() {
        let root = Stream::new(0);
        let a: Vec<u64> = {
            let mut s = root.fork(0);
            (0..8).map(|_| s.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut s = root.fork(1);
            (0..8).map(|_| s.next_u64()).collect()
        };
        assert_ne!(a, b);
    }

    #[test]
    fn ln_factorial_matches_direct_product() {
        let mut acc = 0.0f64;
        for k in 1..=30u64 {
            acc += (k as f64).ln();
            let got = ln_factorial(k as f64);
            assert!(
                (got - acc).abs() <= 1e-10 * acc.max(1.0),
                "ln({k}!) = {acc}, got {got}"
            );
        }
    }

    #[test]
    fn uniform_moments() {
        let mut s = Stream::new(123);
        let n = 200_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let u = s.uniform();
            assert!((0.0..1.0).contains(&u));
            sum += u;
            sum2 += u * u;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        assert!((mean - 0.5).abs() < 3.0 * (1.0 / 12.0f64 / n as f64).sqrt());
        assert!((var - 1.0 / 12.0).abs() < 0.002);
    }

    #[test]
    fn normal_moments_and_ks() {
        let mut s = Stream::new(2024);
        let n = 100_000usize;
        let mut xs: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");

        // One-sample KS against the exact normal CDF.
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let dist = Normal::new(0.0, 1.0).unwrap();
        let mut d = 0.0f64;
        for (i, x) in xs.iter().enumerate() {
            let f = dist.cdf(*x);
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            d = d.max((f - lo).abs()).max((f - hi).abs());
        }
        // 1% critical value is ~1.63/sqrt(n) ≈ 0.0052.
        assert!(d < 0.006, "KS distance {d}");
    }

    #[test]
    fn poisson_moments_across_cutover() {
        // Both samplers must produce the right first two moments, in
        // particular on either side of the mean-10 algorithm switch.
        for (seed, mean) in [(1u64, 0.3), (2, 3.0), (3, 9.9), (4, 10.1), (5, 50.0), (6, 4000.0)] {
            let mut s = Stream::new(seed);
            let n = 100_000usize;
            let mut sum = 0.0;
            let mut sum2 = 0.0;
            for _ in 0..n {
                let k = s.poisson(mean);
                assert!(k >= 0.0 && k.fract() == 0.0);
                sum += k;
                sum2 += k * k;
            }
            let m = sum / n as f64;
            let v = sum2 / n as f64 - m * m;
            let se_mean = (mean / n as f64).sqrt();
            assert!((m - mean).abs() < 4.0 * se_mean, "mean {m} vs {mean}");
            assert!((v - mean).abs() < 0.05 * mean, "var {v} vs {mean}");
        }
    }

    #[test]
    fn poisson_matches_reference_cdf() {
        // Empirical CDF vs statrs at a few quantiles, both regimes.
        for (seed, mean) in [(11u64, 4.0), (12, 25.0)] {
            let mut s = Stream::new(seed);
            let n = 100_000usize;
            let samples: Vec<f64> = (0..n).map(|_| s.poisson(mean)).collect();
            let dist = Poisson::new(mean).unwrap();
            for q in [0.5, 1.0, 1.5] {
                let k = (mean * q).floor();
                let expected = dist.cdf(k as u64);
                let got = samples.iter().filter(|&&x| x <= k).count() as f64 / n as f64;
                let se = (expected * (1.0 - expected) / n as f64).sqrt();
                assert!(
                    (got - expected).abs() < 4.0 * se + 1e-4,
                    "mean {mean} CDF({k}): got {got}, expected {expected}"
                );
            }
        }
    }

    #[test]
    fn poisson_zero_mean_is_zero() {
        let mut s = Stream::new(9);
        for _ in 0..100 {
            assert_eq!(s.poisson(0.0), 0.0);
        }
    }
}
