//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from a
//! run seed, a purpose tag and an index, so results never depend on the order
//! in which environments or evaluation states are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used everywhere in the crate.
pub type SimRng = ChaCha8Rng;

/// Purpose tags keep streams for different roles disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    /// Exogenous noise consumed by the dynamics and observations.
    Exogenous = 1,
    /// Action sampling of stochastic policies.
    Action = 2,
    /// Initial-state sampling.
    Init = 3,
    /// Minibatch shuffling and parameter initialization.
    Learner = 4,
    /// Monte-Carlo estimates (default threshold, shields).
    MonteCarlo = 5,
}

/// Derive an independent stream from `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: Stream, index: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(purpose as u64)));
    rng.set_stream(index);
    rng
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a digest over the bit patterns of a float slice.
pub fn digest(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}
