//! Seed derivation. Every random decision in a run draws from a ChaCha
//! stream keyed by the master seed, a purpose salt, and context (round,
//! client), so no decision depends on evaluation order or method choice.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SALT_INIT: u64 = 0x01;
pub const SALT_SAMPLE: u64 = 0x02;
pub const SALT_SPLIT: u64 = 0x03;
pub const SALT_LOCAL: u64 = 0x04;
pub const SALT_EVAL: u64 = 0x05;
pub const SALT_DATA: u64 = 0x06;
pub const SALT_PROTO: u64 = 0x07;
pub const SALT_CLIENT_GEN: u64 = 0x08;
pub const SALT_PARTITION: u64 = 0x09;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds the parts into one seed; order matters.
pub fn mix(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

/// Stable 64-bit hash of a client id string (FNV-1a).
pub fn hash_id(id: &str) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for b in id.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

pub fn rng_from(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

/// Seed for a client's support/query division. Depends on the master seed
/// and the client only, never on the round or the method, so the division
/// stays fixed across rounds and comparable across methods.
pub fn client_split_seed(master_seed: u64, client_id: &str) -> u64 {
    mix(&[master_seed, SALT_SPLIT, hash_id(client_id)])
}
