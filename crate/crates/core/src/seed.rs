//! Named sub-seeds derived from one master seed.

use sha2::{Digest, Sha256};

/// Stable 64-bit seed for the stream `name` under `master`.
pub fn derive_seed(master: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
