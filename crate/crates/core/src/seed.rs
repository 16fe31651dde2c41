//! Seed derivation.
//!
//! Every component seed is `u64::from_le_bytes(sha256(parent_le || label || index_le)[..8])`.
//! Labels name the component (`"site/<id>"`, `"local"`, `"sample"`, ...), so
//! adding a site or a strategy never changes the seeds of the others.

use sha2::{Digest, Sha256};

pub fn derive(parent: u64, label: &str) -> u64 {
    derive_indexed(parent, label, &[])
}

pub fn derive_indexed(parent: u64, label: &str, indices: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(parent.to_le_bytes());
    hasher.update(label.as_bytes());
    for idx in indices {
        hasher.update(idx.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Hex-encoded SHA-256 of a byte slice.
pub fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
