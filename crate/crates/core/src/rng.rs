//! Seed derivation for reproducible simulation.
//!
//! Every random draw in a simulated experiment comes from a ChaCha8 stream
//! whose 64-bit seed is derived by mixing parent seeds with indices through
//! the SplitMix64 finalizer. The stream for one assignment depends only on
//! `(trial seed, task id, stage, slot)`, so two strategies run on the same
//! trial seed see identical draws for the same stage and slot.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `index` under `parent`.
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ index.wrapping_mul(GOLDEN))
}

/// 64-bit FNV-1a, used to fold string identifiers into seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The random stream owned by one simulated assignment.
pub fn assignment_stream(trial_seed: u64, task_id: &str, stage: u32, slot: u32) -> SimRng {
    let s = derive_seed(trial_seed, fnv1a(task_id.as_bytes()));
    let s = derive_seed(s, u64::from(stage));
    rng_from_seed(derive_seed(s, u64::from(slot)))
}
