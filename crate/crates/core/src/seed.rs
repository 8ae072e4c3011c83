//! Deterministic seed derivation.
//!
//! Every random decision in the system draws from a stream keyed by the
//! experiment seed plus a human-readable label ("warmup.epoch.3",
//! "sample.train.foam.12", ...). Streams for distinct labels are
//! independent, so adding a consumer never perturbs existing ones.

/// FNV-1a hash of a byte string.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// One round of SplitMix64 output mixing.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    splitmix(base ^ fnv1a(label.as_bytes()))
}
