//! Deterministic seed derivation.
//!
//! Every random decision in the crate is driven by a `u64` seed derived from
//! a user-facing base seed plus a stream of context words (restart index,
//! epoch, cell coordinates, ...). Mixing is splitmix64-based, so derived
//! seeds are stable across platforms and releases — unlike hasher defaults.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold a sequence of context words into one derived seed.
pub fn mix(base: u64, words: &[u64]) -> u64 {
    let mut state = splitmix64(base ^ 0x6a09_e667_f3bc_c908);
    for &w in words {
        state = splitmix64(state ^ splitmix64(w));
    }
    state
}

/// Stable tag for string-named seed streams ("init", "shuffle", ...).
pub fn tag(name: &str) -> u64 {
    let mut state = 0xcbf2_9ce4_8422_2325u64; // FNV-1a
    for b in name.as_bytes() {
        state ^= u64::from(*b);
        state = state.wrapping_mul(0x0000_0100_0000_01b3);
    }
    state
}

/// The crate-standard RNG, seeded from a derived `u64`.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Order-sensitive FNV-1a accumulator over branch decisions (ReLU signs,
/// pool argmax picks, clamp masks, hinge activity). Two evaluations share a
/// token only if every recorded decision matched, which is what finite
/// differencing needs to detect kink crossings.
#[derive(Debug, Clone)]
pub struct TokenHasher {
    state: u64,
}

impl TokenHasher {
    pub fn new() -> Self {
        TokenHasher {
            state: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn push_u64(&mut self, v: u64) {
        for byte in v.to_le_bytes() {
            self.state ^= u64::from(byte);
            self.state = self.state.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn push_bit(&mut self, b: bool) {
        self.state ^= u64::from(b) + 1;
        self.state = self.state.wrapping_mul(0x0000_0100_0000_01b3);
    }

    pub fn finish(&self) -> u64 {
        self.state
    }
}

impl Default for TokenHasher {
    fn default() -> Self {
        Self::new()
    }
}
