#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Speech emotion recognition from log-Mel spectrograms: WAV decoding and
//! conditioning, feature extraction, a small autodiff engine, the
//! CNN–Transformer classifier, training, and evaluation.

pub mod audio;
pub mod config;
pub mod data;
pub mod features;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod workflow;

/// FNV-1a hash of a string; stable across platforms and releases.
pub(crate) fn stable_hash(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
