//! Reproducible random streams.
//!
//! Every random quantity in the crate is drawn from a ChaCha8 stream whose
//! 256-bit key is derived from a master seed and a path of integers
//! (`[domain, index, ...]`). ChaCha is a counter-based generator, so a stream
//! depends only on its key and not on how many other streams were consumed
//! before it. This is what makes parallel evaluation schedule-independent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domain for Monte Carlo draws `U^(b)`.
pub const DOMAIN_MC: u64 = 0x4d43;
/// Stream domain for simulated datasets.
pub const DOMAIN_DATA: u64 = 0x4441_5441;
/// Stream domain for per-replication Monte Carlo seeds.
pub const DOMAIN_REPLICATE_SEED: u64 = 0x5345_4544;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a 64-bit child seed from `seed` and `path`.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut state = seed;
    let mut out = splitmix64(&mut state);
    for &p in path {
        state ^= p.wrapping_mul(GOLDEN).rotate_left(17) ^ out;
        out = splitmix64(&mut state);
    }
    out
}

/// Independent generator addressed by `(seed, path)`.
pub fn substream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut state = derive_seed(seed, path);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
