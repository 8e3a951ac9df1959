//! Seed splitting.
//!
//! Every random draw in a run descends from one 64-bit master seed. The
//! stream for episode `t` and purpose `stream` is seeded with
//! `splitmix64(master ^ splitmix64(t * NUM_STREAMS + stream))`, so episodes
//! are independent of each other and of how many draws earlier episodes made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream used to draw the posterior sample of an episode.
pub const STREAM_POSTERIOR: u64 = 0;
/// Stream used by the environment (transitions and rewards).
pub const STREAM_ENV: u64 = 1;
/// Stream used by randomized baselines.
pub const STREAM_POLICY: u64 = 2;
const NUM_STREAMS: u64 = 4;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn episode_seed(master: u64, episode: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(episode.wrapping_mul(NUM_STREAMS).wrapping_add(stream)))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
