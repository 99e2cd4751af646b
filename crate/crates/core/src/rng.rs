//! Seeded, splittable randomness.
//!
//! Every random draw in the crate descends from one root seed. A [`SeedRng`] is
//! only a 64-bit key; [`SeedRng::split`] derives child keys by mixing in a label,
//! and [`SeedRng::stream`] opens a ChaCha8 counter-mode stream keyed by it. Two
//! streams opened from the same key yield the same values, so callers can
//! recreate any draw (batch order, diffusion timestep, noise) from
//! `(seed, labels...)` without carrying generator state around.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedRng {
    key: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        SeedRng {
            key: splitmix64(seed),
        }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn split(&self, label: u64) -> SeedRng {
        SeedRng {
            key: splitmix64(self.key ^ splitmix64(label.wrapping_add(0xA076_1D64_78BD_642F))),
        }
    }

    pub fn split_str(&self, label: &str) -> SeedRng {
        // FNV-1a keeps labels stable across platforms and releases.
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01B3);
        }
        self.split(h)
    }

    pub fn stream(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key)
    }
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}
