//! Seed splitting.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] derived from a
//! single root seed and a stream name. The stream seed is
//! `splitmix64(fnv1a64(name) ^ splitmix64(root))`, so two components never
//! share a stream unless they share a name, and adding a new consumer never
//! perturbs existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A root seed from which named sub-streams are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    root: u64,
}

impl SeedStream {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Seed value for the named stream.
    pub fn derive(&self, name: &str) -> u64 {
        splitmix64(fnv1a64(name.as_bytes()) ^ splitmix64(self.root))
    }

    /// A child stream, for nesting (e.g. one per trajectory).
    pub fn child(&self, name: &str) -> SeedStream {
        SeedStream::new(self.derive(name))
    }

    pub fn rng(&self, name: &str) -> Rng {
        Rng::seed_from_u64(self.derive(name))
    }
}

/// Shorthand for a generator seeded directly from an integer.
pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
