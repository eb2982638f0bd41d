//! Seed splitting. Every random draw in the crate comes from a ChaCha8
//! stream keyed by a value derived here, so results never depend on
//! scheduling or insertion order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Name of the mixing function, recorded in suite manifests.
pub const MIXER: &str = "splitmix64(master ^ splitmix64(index))";

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `index` under `master`.
pub fn mix(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One uniform draw in `[0, 1)` from the stream keyed by `seed`.
pub fn unit_draw(seed: u64) -> f64 {
    rng(seed).gen::<f64>()
}

/// Stable 64-bit hash of a string (first eight bytes of its SHA-256).
pub fn hash_str(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(bytes)
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
