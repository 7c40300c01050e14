//! Deterministic RNG substreams.
//!
//! Every random quantity is drawn from a ChaCha8 stream identified by the
//! master seed, a purpose tag and an index, so results never depend on the
//! order in which parallel workers run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Trajectory = 1,
    Split = 2,
    Init = 3,
    Batch = 4,
}

pub fn substream(master: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master ^ ((purpose as u64) << 56));
    rng.set_stream(index);
    rng
}
