//! Named random substreams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams. Each consumer draws only from its own stream,
/// so adding draws in one place never shifts another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Shuffle = 3,
    Downsample = 4,
    SyntheticParams = 5,
    Calibration = 6,
    RandomGates = 7,
    Split = 8,
}

pub fn substream(master_seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream as u64);
    rng
}

/// The `index`-th member of a family of streams, e.g. one shuffle per epoch.
/// Index 0 is a different stream from [`substream`].
pub fn indexed_substream(master_seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(((index + 1) << 8) | stream as u64);
    rng
}
