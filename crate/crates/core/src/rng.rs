//! Counter-based splittable randomness.
//!
//! Every random decision in the crate is drawn from a [`SplitMix64`] stream
//! whose seed is derived from a root seed and a path of integer labels
//! (slot index, purpose tag, step number ...) with [`split`]. Because a
//! stream depends only on its label path, work items can be evaluated in any
//! order or on any number of threads and still see the same numbers.
//!
//! SplitMix64 is Steele, Lea & Flood's generator: the state advances by the
//! golden-ratio increment and each output is the state passed through the
//! Stafford "mix13" finalizer.

use rand_core::{impls, RngCore, SeedableRng};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed of child stream `index` of `seed`.
#[inline]
pub fn split(seed: u64, index: u64) -> u64 {
    mix64(mix64(seed.wrapping_add(GOLDEN_GAMMA)) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Derives a seed along a path of labels: `split(split(seed, a), b) ...`.
pub fn split_path(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(seed, |s, &i| split(s, i))
}

/// Purpose tags used as the last label of a derivation path so that
/// independent decisions of one work item never share a stream.
pub mod lane {
    pub const TIMESTEP: u64 = 1;
    pub const ORIGINAL: u64 = 2;
    pub const GATE: u64 = 3;
    pub const AUGMENTED: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const DROP: u64 = 6;
    pub const PLACEMENT: u64 = 7;
    pub const DONOR: u64 = 8;
    pub const BASE: u64 = 9;
    pub const CROP: u64 = 10;
    pub const INIT: u64 = 11;
    pub const BATCH: u64 = 12;
    pub const JITTER: u64 = 13;
    pub const ABLATE: u64 = 14;
    pub const CURATE: u64 = 15;
    pub const HOLDOUT: u64 = 16;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Stream for a label path under `seed`.
    pub fn derive(seed: u64, path: &[u64]) -> Self {
        Self::new(split_path(seed, path))
    }
}

impl RngCore for SplitMix64 {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        impls::fill_bytes_via_next(self, dst)
    }
}

impl SeedableRng for SplitMix64 {
    type Seed = [u8; 8];

    fn from_seed(seed: Self::Seed) -> Self {
        Self::new(u64::from_le_bytes(seed))
    }

    fn seed_from_u64(state: u64) -> Self {
        Self::new(state)
    }
}

/// 64-bit FNV-1a, used wherever a string must map to a stable integer.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
