//! Stable seed derivation.
//!
//! Every stochastic step draws from its own generator keyed by a tuple
//! such as `(master, round, client, phase)`. Results therefore do not
//! depend on scheduling order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream tags so that keys from different subsystems never collide.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Partition = 2,
    ModelInit = 3,
    Sampling = 4,
    LocalTrain = 5,
    CrossTrain = 6,
    Broadcast = 7,
    Mixup = 8,
    Probe = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a list of words into one 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6A09_E667_F3BC_C908, |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}

pub fn rng_for(stream: Stream, parts: &[u64]) -> SimRng {
    let mut key = Vec::with_capacity(parts.len() + 1);
    key.push(stream as u64);
    key.extend_from_slice(parts);
    SimRng::seed_from_u64(derive_seed(&key))
}
