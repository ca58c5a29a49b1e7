//! Deterministic seed derivation. All randomness in a run flows from one
//! global seed; substreams are split off with a stable FNV-1a hash so that
//! results do not depend on platform hashers or iteration order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(state: u64, bytes: &[u8]) -> u64 {
    let mut h = state;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Stable 64-bit hash of a byte-string tag mixed with a base seed.
pub fn derive_seed(global: u64, tag: &str) -> u64 {
    let h = fnv1a(FNV_OFFSET, &global.to_le_bytes());
    fnv1a(h, tag.as_bytes())
}

/// Per-item substream, e.g. per-query noise seeds keyed by instance id.
pub fn derive_seed_for_id(global: u64, tag: &str, id: &str) -> u64 {
    let h = fnv1a(derive_seed(global, tag), b"/");
    fnv1a(h, id.as_bytes())
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
