//! Hierarchical seed derivation.
//!
//! Every random stream in an experiment is keyed by the master seed, a stream
//! tag and up to a few indices (client, cluster, round). The split function is
//! SplitMix64 folded over the key words, so changing one knob of a config does
//! not perturb unrelated streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Topology = 1,
    DataCenters = 2,
    DataSamples = 3,
    Split = 4,
    Init = 5,
    Shuffle = 6,
    Arrival = 7,
    Participation = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `master`, a stream tag and a path of indices.
pub fn derive(master: u64, stream: Stream, path: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ splitmix64(stream as u64));
    for &word in path {
        h = splitmix64(h ^ splitmix64(word.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
