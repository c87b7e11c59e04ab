//! Seed derivation.
//!
//! All randomness flows from explicit `u64` seeds. Sub-seeds are derived with
//! SplitMix64 so that independent streams (initialisation, shuffling, search)
//! never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One SplitMix64 output step.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed, a stream label and an index.
#[inline(never)]
pub fn derive(parent: u64, stream: &str, index: u64) -> u64 {
    let mut h = splitmix64(parent);
    for b in stream.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_separates_streams_and_indices() {
        let a = derive(7, "init", 0);
        assert_eq!(a, derive(7, "init", 0));
        assert_ne!(a, derive(7, "init", 1));
        assert_ne!(a, derive(7, "shuffle", 0));
        assert_ne!(a, derive(8, "init", 0));
    }
}
