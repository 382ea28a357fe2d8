//! Deterministic derivation of RNG keys from a base seed and a cell identity.
//!
//! Every simulated cell (protocol, curve, correlation mode, geometry, noise
//! parameters) gets its own 256-bit ChaCha key derived from the user's base seed
//! and a hash of the cell's canonical description. Realizations and windows then
//! select independent streams of that key, so ensembles are reproducible across
//! runs and thread counts, and common random numbers across cells are obtained
//! by simply omitting the distinguishing fields from the description.

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hashes a canonical cell description assembled from labelled parts.
///
/// Parts are joined with `;` so that field boundaries cannot collide. Float
/// fields should be rendered with `{:?}` or via `to_bits` by the caller.
pub fn salt_from_parts(parts: &[&str]) -> u64 {
    fnv1a64(parts.join(";").as_bytes())
}

/// Builds a 256-bit RNG key from the base seed and a cell salt.
pub fn trace_key(base_seed: u64, salt: u64) -> [u8; 32] {
    let mut key = [0u8; 32];
    key[..16].copy_from_slice(b"geodeph-noise-v1");
    key[16..24].copy_from_slice(&base_seed.to_le_bytes());
    key[24..32].copy_from_slice(&salt.to_le_bytes());
    key
}
