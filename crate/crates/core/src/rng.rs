//! Seedable random streams.
//!
//! The generator is xoshiro256++ seeded through SplitMix64 (the reference
//! `seed_from_u64` construction). Every derived quantity uses a fixed,
//! documented conversion so the streams can be reproduced outside Rust:
//!
//! * `uniform_f32`: top 24 bits of the next u64, times 2^-24, in [0, 1).
//! * `uniform_f64`: top 53 bits, times 2^-53, in [0, 1).
//! * `below(n)`: rejection sampling on `next_u64 % n` with the zone
//!   `[0, u64::MAX - (u64::MAX % n))`.
//! * `normal`: Box-Muller on two `uniform_f64` draws, `u1` mapped to (0, 1],
//!   returning only the cosine branch (one normal per two uniforms).
//! * `shuffle`: Fisher-Yates from the last index down, `j = below(i + 1)`.
//! * `derive_seed(seed, tag)`: SplitMix64 finalizer of `seed ^ rotl(tag, 32)
//!   + 0x9E3779B97F4A7C15 * (tag + 1)`.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

#[derive(Clone, Debug)]
pub struct Rng(Xoshiro256PlusPlus);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    /// Independent stream keyed by `tag`.
    pub fn derived(seed: u64, tag: u64) -> Self {
        Rng::new(derive_seed(seed, tag))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn uniform_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
    }

    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform_f64() < p
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform_f64();
        let u2 = self.uniform_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_vec(&mut self, len: usize, std: f32) -> Vec<f32> {
        (0..len).map(|_| (self.normal() * std as f64) as f32).collect()
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = (seed ^ tag.rotate_left(32)).wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(tag.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit tag for a string label.
pub fn tag(label: &str) -> u64 {
    // FNV-1a
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
