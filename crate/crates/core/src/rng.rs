//! Seed derivation. Every random stream in the simulator is a ChaCha8
//! generator keyed by a seed mixed from the experiment seed and a label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed for `stream` from `seed`.
pub fn derive(seed: u64, stream: u64) -> u64 {
    mix(mix(seed) ^ stream.rotate_left(17) ^ 0xD1B5_4A32_D192_ED03)
}

pub fn derive2(seed: u64, a: u64, b: u64) -> u64 {
    derive(derive(seed, a), b)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// Stream labels.
pub(crate) const DOMAINS: u64 = 1;
pub(crate) const CORPUS: u64 = 2;
pub(crate) const PARTITION: u64 = 3;
pub(crate) const BACKBONE: u64 = 4;
pub(crate) const PRETRAIN: u64 = 5;
pub(crate) const ADAPTER_R: u64 = 6;
pub(crate) const ADAPTER_S: u64 = 7;
pub(crate) const DISTILL: u64 = 8;
pub(crate) const CLIENT: u64 = 9;
pub(crate) const HELDOUT: u64 = 10;
pub(crate) const PROBE: u64 = 11;
pub(crate) const STAGE_R: u64 = 12;
pub(crate) const STAGE_S: u64 = 13;
pub(crate) const MIXTURE: u64 = 14;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_streams_differ() {
        assert_ne!(derive(0, 1), derive(0, 2));
        assert_ne!(derive(0, 1), derive(1, 1));
        assert_eq!(derive(5, 9), derive(5, 9));
    }
}
