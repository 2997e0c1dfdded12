//! Seed derivation.
//!
//! All randomness is drawn from ChaCha8 streams. A stream is keyed by a
//! master seed plus a purpose tag and indices, hashed with SplitMix64, so
//! the value a subject or epoch receives does not depend on the order in
//! which streams are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a seed with a sequence of words into a new seed.
pub fn derive_seed(seed: u64, words: &[u64]) -> u64 {
    words.iter().fold(splitmix64(seed), |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

/// FNV-1a of a tag, used to give each purpose its own stream family.
pub fn tag(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn stream(seed: u64, purpose: &str, words: &[u64]) -> ChaCha8Rng {
    let mut all = [0u64; 8];
    all[0] = tag(purpose);
    let n = words.len().min(7);
    all[1..=n].copy_from_slice(&words[..n]);
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &all[..=n]))
}
