//! Seeded counter-based random number generation.
//!
//! Every random draw in the crate flows through [`SplitMix64`] so corpora,
//! training runs and edits can be reproduced bit-for-bit from a single seed
//! in any language:
//!
//! * state advances by the golden-ratio increment `0x9E3779B97F4A7C15`;
//! * output mixing is Stebbing's variant 13 (`>> 30 * 0xBF58476D1CE4E5B9`,
//!   `>> 27 * 0x94D049BB133111EB`, `>> 31`);
//! * uniforms take the top 53 bits: `(x >> 11) * 2^-53`, so they lie in `[0, 1)`;
//! * normals use Box–Muller on two uniforms `u1, u2`, with `u1` replaced by
//!   `1 - u1` so the logarithm is finite; both outputs of a pair are used,
//!   cosine branch first.
//!
//! Per-module seeds are derived as `master ^ fnv1a64(tag)`.

use crate::scalar::Scalar;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
    spare: Option<u64>,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed, spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: u64, hi: u64) -> u64 {
        assert!(lo <= hi, "empty range {lo}..={hi}");
        let span = hi - lo;
        if span == u64::MAX {
            return self.next_u64();
        }
        let n = span + 1;
        // rejection sampling keeps the draw exactly uniform
        let zone = u64::MAX - (u64::MAX % n) - 1;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return lo + x % n;
            }
        }
    }

    /// Uniform index in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index over an empty range");
        self.range_inclusive(0, n as u64 - 1) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(bits) = self.spare.take() {
            return f64::from_bits(bits);
        }
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some((r * theta.sin()).to_bits());
        r * theta.cos()
    }

    pub fn normal_vec<S: Scalar>(&mut self, n: usize) -> Vec<S> {
        (0..n).map(|_| S::from_f64_lossy(self.normal())).collect()
    }

    /// Independent child stream; advances this generator by one draw.
    pub fn fork(&mut self) -> Self {
        Self::new(self.next_u64())
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Module seed from the master seed: `master ^ fnv1a64(tag)`.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    master ^ fnv1a64(tag.as_bytes())
}
