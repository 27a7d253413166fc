//! Short content digests used to tie artifacts to the schedule and backbone
//! they were produced with.

use sha2::{Digest, Sha256};

/// First 16 hex characters of the SHA-256 of the little-endian bit patterns.
pub fn of_f64s(values: impl IntoIterator<Item = f64>) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex16(&h.finalize())
}

pub fn of_bytes(bytes: &[u8]) -> String {
    hex16(&Sha256::digest(bytes))
}

fn hex16(digest: &[u8]) -> String {
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
