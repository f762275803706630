//! Deterministic seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator keyed by a tuple
//! of integers (run seed, epoch, sample index, ...), so results never depend
//! on iteration or thread order.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator keyed by an ordered tuple of integers.
pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    let mut h = 0x005E_ED0F_5A11_u64;
    for &p in parts {
        h = splitmix(h ^ splitmix(p));
    }
    let mut seed = [0u8; 32];
    for (i, chunk) in seed.chunks_exact_mut(8).enumerate() {
        chunk.copy_from_slice(&splitmix(h.wrapping_add(i as u64)).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// Stable 64-bit hash of a string (FNV-1a).
pub fn hash_str(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// 64-bit seed derived from an ordered tuple of integers.
pub fn derive(parts: &[u64]) -> u64 {
    use rand::RngCore;
    stream(parts).next_u64()
}
