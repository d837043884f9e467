//! Small, stable hashing helpers.
//!
//! Everything here must produce the same values on every platform and
//! toolchain, since planted instances and the pooled projection are
//! regenerated from these streams by external scorers.

use sha2::{Digest, Sha256};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// One step of the splitmix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Keyed hash of `(seed, id, index)`.
pub fn keyed(seed: u64, id: &str, index: u64) -> u64 {
    splitmix64(fnv1a(id.as_bytes()) ^ splitmix64(seed ^ splitmix64(index)))
}

/// Maps a 64-bit word to a real in `[0, 1)` using its top 53 bits.
pub fn unit_interval(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
