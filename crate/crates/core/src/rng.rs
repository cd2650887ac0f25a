//! Keyed random streams.
//!
//! Every stochastic draw in the sampler is taken from a stream identified by
//! `(root_seed, purpose, iteration, global index)`. The stream a sample sees
//! therefore does not depend on which rank owns it or on the group size.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type StreamRng = ChaCha12Rng;

/// What a stream is used for; keeps streams of different purposes disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Prior = 1,
    Proposal = 2,
    Likelihood = 3,
    ResampleOffset = 4,
    Simulation = 5,
    Chain = 6,
    Validation = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `(root_seed, purpose, k, index)`.
pub fn keyed(root_seed: u64, purpose: Purpose, k: u64, index: u64) -> StreamRng {
    let seed = splitmix64(root_seed ^ splitmix64(purpose as u64));
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(splitmix64(k.wrapping_mul(0x1000_0000_01b3) ^ splitmix64(index)));
    rng
}
