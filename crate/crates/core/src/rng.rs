//! Seeded random streams.
//!
//! Every run owns a single root seed. Independent consumers (data order,
//! dropout, weight init, aggregator sampling) draw from separate ChaCha
//! streams keyed by a fixed stream id, so changing the aggregation method
//! never perturbs the data order or the initial weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers split off a root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    DataOrder = 2,
    Dropout = 3,
    Aggregator = 4,
    Generator = 5,
    Verify = 6,
}

/// Generator for `stream` under `seed`.
pub fn stream(seed: u64, stream: Stream) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Plain generator from a seed, stream 0.
pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
