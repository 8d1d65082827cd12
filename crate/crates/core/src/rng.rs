//! Seeded random streams.
//!
//! A run has one seed. Each consumer draws from its own ChaCha8 stream
//! (same key, distinct stream id), so changing how many draws one consumer
//! makes never shifts the values another consumer sees:
//!
//! | stream        | consumer                                          |
//! |---------------|---------------------------------------------------|
//! | `Init`        | parameter initialization, in parameter order      |
//! | `AttnMask`    | attention masks: encoder, level, batch, head, row |
//! | `Dropout`     | channel-mixing dropout masks in forward order     |
//! | `Shuffle`     | batch order, one permutation per epoch            |
//! | `Synth`       | corpus generation (sub-seeded per slide)          |
//! | `GeneSelect`  | gene panel sampling                               |
//! | `Split`       | slide split assignment                            |
//! | `Probe`       | synthetic inputs for gradient checks and benches  |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    AttnMask = 1,
    Dropout = 2,
    Shuffle = 3,
    Synth = 4,
    GeneSelect = 5,
    Split = 6,
    Probe = 7,
}

pub fn stream(seed: u64, which: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Stream for a sub-object (e.g. one slide) keyed by an index.
pub fn substream(seed: u64, which: Stream, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(which as u64);
    rng
}

/// The two streams consumed by a training-mode forward pass.
pub struct ForwardRng {
    pub mask: StreamRng,
    pub dropout: StreamRng,
}

impl ForwardRng {
    pub fn new(seed: u64) -> Self {
        Self {
            mask: stream(seed, Stream::AttnMask),
            dropout: stream(seed, Stream::Dropout),
        }
    }
}
