//! Named random substreams derived from one run seed.
//!
//! Every consumer of randomness (pilot selection, trace generation, DAG
//! grouping) draws from its own ChaCha stream so that reseeding or adding
//! one consumer never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const PILOTS: &str = "pilots";
pub const GENERATE: &str = "generate";
pub const DAG_GROUPING: &str = "dag-grouping";

/// FNV-1a, used only to map a stream name onto a ChaCha stream id.
fn stream_id(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(name));
    rng
}
