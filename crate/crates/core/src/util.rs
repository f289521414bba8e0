//! Small shared helpers.

/// FNV-1a 64-bit hash. Used wherever a hash must be stable across runs,
/// platforms and compiler versions (seed derivation, feature hashing).
pub fn stable_hash64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a per-item seed from a run seed and a string key.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    seed ^ stable_hash64(key.as_bytes())
}
