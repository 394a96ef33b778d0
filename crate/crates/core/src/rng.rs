//! Seed derivation. Every random stream in a run is a pure function of the
//! root seed, a role label and a tuple of indices, so results never depend
//! on worker count or call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Hashes `(seed, role, indices)` into a 64-bit stream seed.
pub fn derive_seed(seed: u64, role: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix(seed);
    for b in role.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    h = splitmix(h ^ 0xFF);
    for &i in indices {
        h = splitmix(h ^ i);
    }
    h
}

pub fn stream(seed: u64, role: &str, indices: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, role, indices))
}
