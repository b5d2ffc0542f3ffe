//! Seeded random streams.
//!
//! Every stochastic step in the crate draws from ChaCha8, a counter-based
//! generator with a fixed, platform-independent output stream. Sub-streams are
//! derived from a global seed plus a purpose tag and a few integer
//! coordinates (epoch, step, order, ...), so reruns with the same seed are
//! bit-identical regardless of call order elsewhere.

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

/// Derive a sub-seed from a base seed, a purpose tag and coordinates.
pub fn derive_seed(seed: u64, tag: &str, coords: &[u64]) -> u64 {
    let mut h = mix(seed);
    for b in tag.bytes() {
        h = mix(h ^ u64::from(b));
    }
    for &c in coords {
        h = mix(h ^ c);
    }
    h
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(seed: u64, tag: &str, coords: &[u64]) -> Rng {
    rng_from_seed(derive_seed(seed, tag, coords))
}
