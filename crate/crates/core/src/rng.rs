//! Reproducible, parallel-safe random streams.
//!
//! Every stream is a ChaCha8 keystream. The 256-bit key is expanded from the
//! 64-bit base seed; the 64-bit ChaCha stream id is
//! `splitmix64(domain) ^ index`, so (seed, domain, index) selects a disjoint
//! keystream and the draw index is ChaCha's own block counter. A replicate can
//! therefore be regenerated on any thread, in any order, bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose of a stream; keeps datasets, probes and replicates from sharing draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Replicate,
    OracleDataset,
    FrozenDataset,
    Probes,
    MonteCarlo,
    Demo,
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::Replicate => 0,
            Domain::OracleDataset => 1,
            Domain::FrozenDataset => 2,
            Domain::Probes => 3,
            Domain::MonteCarlo => 4,
            Domain::Demo => 5,
        }
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, domain: Domain, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(splitmix64(domain.tag()) ^ index);
    rng
}
