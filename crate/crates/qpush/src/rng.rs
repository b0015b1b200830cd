//! Deterministic, addressable randomness.
//!
//! Every random draw in a run is made from a stream addressed by
//! `(master seed, node, round, purpose)`. The stream id is formed by three
//! chained SplitMix64 finalizer steps:
//!
//! ```text
//! h0 = mix(master ^ (purpose_tag * 0x9e3779b97f4a7c15))
//! h1 = mix(h0 ^ ((node + 1)  * 0xbf58476d1ce4e5b9))
//! h2 = mix(h1 ^ ((round + 1) * 0x94d049bb133111eb))
//! ```
//!
//! and `h2` seeds a ChaCha8 stream. The layout gives two properties the rest
//! of the crate leans on:
//!
//! - **replayability**: the matrix-form oracle can re-derive exactly the
//!   stream the per-node engine used for any (node, round) pair, without
//!   sharing any mutable rng state with it;
//! - **order independence**: per-node work inside a round may be evaluated
//!   in any order (or in parallel) without changing a single draw.
//!
//! The `+ 1` offsets keep node 0 / round 0 from degenerating into a plain
//! xor of the master seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is consumed for. Tags are part of the addressing contract:
/// renumbering them silently changes every run, so they are fixed explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    /// Initial values (gossip starting vectors, dataset generation).
    Init = 1,
    /// Stochastic rounding decisions inside the quantizer.
    Quantize = 2,
    /// Mini-batch / sample selection for stochastic gradients.
    Gradient = 3,
    /// Auxiliary estimation draws (constant estimation, variance probes).
    Probe = 4,
}

/// Pseudo-node id for draws that belong to the run as a whole rather than to
/// any single node (e.g. the shared least-squares center).
pub const GLOBAL: usize = usize::MAX;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive the ChaCha8 stream for `(master, node, round, purpose)`.
pub fn stream(master: u64, node: usize, round: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut h = mix(master ^ (purpose as u64).wrapping_mul(0x9e3779b97f4a7c15));
    h = mix(h ^ (node as u64).wrapping_add(1).wrapping_mul(0xbf58476d1ce4e5b9));
    h = mix(h ^ round.wrapping_add(1).wrapping_mul(0x94d049bb133111eb));
    ChaCha8Rng::seed_from_u64(h)
}
