//! Named seed derivation.
//!
//! Every random stream in the crate is derived from one master seed plus a
//! `(component, index...)` path, so any single sequence, MC batch or
//! initialization can be regenerated in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used for all simulation, sampling and initialization.
pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed`, a component label and an index path.
///
/// The mixing is a fixed splitmix64 chain over the label bytes and indices,
/// so results are stable across platforms and toolchains.
pub fn derive_seed(seed: u64, component: &str, path: &[u64]) -> u64 {
    let mut h = splitmix(seed);
    for b in component.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    // separator so ("ab", [1]) and ("a", [..]) never collide trivially
    h = splitmix(h ^ 0xFF);
    for &i in path {
        h = splitmix(h ^ i);
    }
    h
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn derived_rng(seed: u64, component: &str, path: &[u64]) -> Rng {
    rng_from(derive_seed(seed, component, path))
}
