//! Seeded, splittable randomness.
//!
//! Every stage derives its own generator from the run seed and a stage label,
//! so adding a stage never perturbs the random stream of another one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit key for `(seed, label)`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = splitmix64(seed);
    for b in label.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    h
}

pub fn stage_rng(seed: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, label))
}

/// Generator for the `index`-th item of a stage (per-user, per-epoch, per-job).
pub fn indexed_rng(seed: u64, label: &str, index: u64) -> Rng {
    Rng::seed_from_u64(splitmix64(derive_seed(seed, label) ^ splitmix64(index)))
}
