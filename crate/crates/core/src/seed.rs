//! Stable sub-seed derivation.

use sha2::{Digest, Sha256};

/// Derives an independent seed from a master seed and a purpose string.
///
/// The mapping is fixed across platforms and releases: the first eight bytes
/// (little endian) of `SHA-256(master_le ‖ purpose)`.
pub fn derive_seed(master: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
