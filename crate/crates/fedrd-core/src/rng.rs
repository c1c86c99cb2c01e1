//! Deterministic counter-based random number streams.
//!
//! Every random draw in the simulator comes from a stream whose key is
//! derived from a master seed and a path of integers (stage tag, party id,
//! iteration, sample id, ...). Streams are independent of scheduling and of
//! each other, so a run is reproducible bit-for-bit from its seed alone.
//!
//! The generator is a counter-mode SplitMix64: output `i` of a stream is the
//! SplitMix64 finalizer applied to `key + (i + 1) * GOLDEN`. Not
//! cryptographic; never use for secrets.

use crate::math;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a stream key from a seed and a path of integers.
///
/// `derive(s, &[a, b])` differs from `derive(s, &[b, a])` and from
/// `derive(derive(s, &[a]), &[])`; paths are position-sensitive.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    let mut key = mix(seed ^ GOLDEN);
    for &part in path {
        key = mix(key.wrapping_add(GOLDEN) ^ mix(part));
    }
    key
}

/// A deterministic random stream with an explicit counter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamRng {
    key: u64,
    counter: u64,
}

impl StreamRng {
    pub fn from_key(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    /// Stream keyed by `derive(seed, path)`.
    pub fn from_path(seed: u64, path: &[u64]) -> Self {
        Self::from_key(derive(seed, path))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        mix(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[0, n)` without modulo bias.
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        if n.is_power_of_two() {
            return self.next_u64() & (n - 1);
        }
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Uniform in `[lo, hi)`.
    #[inline]
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Bernoulli draw with success probability `p`.
    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal draw via Box-Muller (two uniforms per draw; no
    /// caching, so draw counts stay predictable).
    pub fn normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * core::f64::consts::PI * u2)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}
