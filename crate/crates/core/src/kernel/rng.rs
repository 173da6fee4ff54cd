use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Named random stream: the same `(seed, stream)` pair always yields the
/// same draws, independent of thread count or call site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub const fn new(seed: u64, stream: u64) -> Self {
        RngStream { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// Derived stream for a sub-task, e.g. one epoch of one phase.
    pub const fn child(&self, tag: u64) -> Self {
        RngStream {
            seed: self.seed,
            stream: self.stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag),
        }
    }
}
