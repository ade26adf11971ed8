//! Seeded random streams.
//!
//! Every stochastic component draws from its own [`StreamRng`], derived from a
//! parent seed by a label and a counter. Child seeds depend only on
//! `(parent, label, index)`, so adding a new consumer never shifts the draws
//! seen by existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random stream used throughout the crate. Serializable, so engine state
/// snapshots resume mid-stream.
pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Derives a child seed from `parent`, a stream `label` and an `index`.
pub fn derive_seed(parent: u64, label: &str, index: u64) -> u64 {
    let h = splitmix64(parent);
    let h = splitmix64(h ^ fnv1a(label));
    splitmix64(h ^ splitmix64(index))
}

pub fn stream(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derivation_is_stable_and_label_sensitive() {
        assert_eq!(derive_seed(7, "users", 0), derive_seed(7, "users", 0));
        assert_ne!(derive_seed(7, "users", 0), derive_seed(7, "engine", 0));
        assert_ne!(derive_seed(7, "users", 0), derive_seed(7, "users", 1));
        assert_ne!(derive_seed(7, "users", 0), derive_seed(8, "users", 0));
    }

    #[test]
    fn streams_replay() {
        let mut a = stream(3);
        let mut b = stream(3);
        for _ in 0..4 {
            assert_eq!(a.gen::<u64>(), b.gen::<u64>());
        }
    }
}
