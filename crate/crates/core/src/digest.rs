//! 64-bit content digests for parameter sets and latents.

use egic_tensor::ParamStore;
use sha2::{Digest, Sha256};

fn truncate(hash: &[u8]) -> u64 {
    u64::from_le_bytes(hash[..8].try_into().expect("sha256 is 32 bytes"))
}

/// Digest over names, shapes and exact bit patterns of every parameter.
pub fn params(store: &ParamStore) -> u64 {
    let mut h = Sha256::new();
    for (name, value) in store.iter() {
        h.update(name.as_bytes());
        h.update([0u8]);
        for &d in value.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in value.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    truncate(&h.finalize())
}

pub fn bytes(data: &[u8]) -> u64 {
    truncate(&Sha256::digest(data))
}
