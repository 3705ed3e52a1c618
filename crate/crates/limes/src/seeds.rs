//! Deterministic derivation of per-purpose RNG seeds.
//!
//! Every random decision in a run is driven by a seed derived from a base
//! seed, a stream tag, and an index (time step, realization, ...). Re-deriving
//! instead of threading RNG state keeps runs resumable: continuing from a
//! checkpoint reproduces the exact seed sequence of an uninterrupted run.

/// Train/eval partition of a time-step batch.
pub(crate) const STREAM_SPLIT: u64 = 1;
/// Minibatch shuffling inside one training pass.
pub(crate) const STREAM_TRAIN: u64 = 2;
/// Historical-prior sampling of the `random` baseline.
pub(crate) const STREAM_RANDOM_TARGET: u64 = 3;
/// Per-realization learner state seed.
pub(crate) const STREAM_STATE: u64 = 4;

/// Mix (base, stream, index) into a seed with a splitmix64 finalizer.
pub(crate) fn derive(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Pack a (realization, time step) pair into one index.
pub(crate) fn pack(realization: usize, t: usize) -> u64 {
    ((realization as u64) << 32) | (t as u64 & 0xFFFF_FFFF)
}
