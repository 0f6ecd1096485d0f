//! Seeded random streams.
//!
//! Every random decision derives from one user seed through a named
//! substream, so that e.g. changing the number of training epochs never
//! perturbs the data split.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Named substreams used across the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Split,
    Init,
    Sampling,
    Generation,
}

impl Stream {
    fn label(self) -> &'static str {
        match self {
            Stream::Split => "split",
            Stream::Init => "init",
            Stream::Sampling => "sampling",
            Stream::Generation => "generation",
        }
    }
}

/// Derive an independent generator for `(seed, stream, index)`.
pub fn substream(seed: u64, stream: Stream, index: u64) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.label().as_bytes());
    h.update(index.to_le_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}
