//! Deterministic derivation of independent random streams.
//!
//! Every stochastic component gets its own ChaCha12 stream keyed by the run
//! seed, a domain label, and up to two indices (e.g. step and slot). Streams
//! are independent of worker count and scheduling, which is what makes whole
//! training runs reproducible byte-for-byte.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `(seed, domain, a, b)` into a single 64-bit stream key.
pub fn derive_seed(seed: u64, domain: &str, a: u64, b: u64) -> u64 {
    let mut state = seed ^ 0xA076_1D64_78BD_642F;
    for byte in domain.as_bytes() {
        state ^= u64::from(*byte);
        splitmix64(&mut state);
    }
    state ^= a;
    splitmix64(&mut state);
    state ^= b;
    splitmix64(&mut state)
}

/// Builds an independent ChaCha12 generator for `(seed, domain, a, b)`.
pub fn stream_rng(seed: u64, domain: &str, a: u64, b: u64) -> ChaCha12Rng {
    let mut key = derive_seed(seed, domain, a, b);
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut key).to_le_bytes());
    }
    ChaCha12Rng::from_seed(bytes)
}
