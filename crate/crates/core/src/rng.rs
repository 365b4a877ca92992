//! Named random substreams derived from a single root seed.
//!
//! Every source of randomness in a run (data generation, parameter init,
//! batch shuffling, ...) draws from its own stream so that changing one axis
//! of an experiment leaves the others untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic seed for the substream `name` under `root`.
pub fn named_seed(root: u64, name: &str) -> u64 {
    splitmix64(root ^ fnv1a64(name.as_bytes()))
}

/// Seeded generator for the substream `name` under `root`.
pub fn substream(root: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(named_seed(root, name))
}
