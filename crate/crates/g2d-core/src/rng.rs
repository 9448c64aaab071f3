//! Seed derivation helpers.
//!
//! All stochastic code in the crate draws from `ChaCha8Rng` instances keyed
//! by seeds derived here, so every output is a pure function of the master
//! seed regardless of thread count or call order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; stable across platforms and crate versions.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed and a list of context words
/// (identity index, view index, stage tag, epoch, ...).
pub fn derive_seed(master: u64, words: &[u64]) -> u64 {
    let mut s = splitmix64(master ^ 0x58c3_c2d7_15ae_11d3);
    for &w in words {
        s = splitmix64(s ^ splitmix64(w));
    }
    s
}

/// Deterministic RNG for a derived seed.
pub fn rng_for(master: u64, words: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, words))
}

/// Stage tags used as context words so different stages never share streams.
pub mod tag {
    pub const IDENTITY: u64 = 1;
    pub const VIEW: u64 = 2;
    pub const TEMPLATE: u64 = 3;
    pub const TEACHER: u64 = 4;
    pub const ENCODER: u64 = 5;
    pub const REFORMER: u64 = 6;
    pub const CLASSIFIER: u64 = 7;
    pub const EVAL: u64 = 8;
    pub const AUGMENT: u64 = 9;
    pub const SHUFFLE: u64 = 10;
    pub const INIT: u64 = 11;
    pub const INTERP: u64 = 12;
    pub const CE_VARIANT: u64 = 13;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derive_seed_is_deterministic_and_context_sensitive() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let mut a = rng_for(42, &[tag::VIEW, 3]);
        let mut b = rng_for(42, &[tag::VIEW, 3]);
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }
}
