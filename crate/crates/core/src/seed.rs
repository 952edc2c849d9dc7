//! Stable seed derivation.
//!
//! Every random draw in a run is keyed by a seed derived from the run seed and
//! a list of labels (query id, step, sample index, ...), so results never
//! depend on scheduling order or thread count.

use sha2::{Digest, Sha256};

/// Hashes `base` together with `parts` into a new 64-bit seed.
pub fn derive_seed<S: AsRef<str>>(base: u64, parts: &[S]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in parts {
        let p = p.as_ref().as_bytes();
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
