//! Seeded randomness.
//!
//! Every random draw comes from a ChaCha8 stream selected by
//! `(seed, purpose, index)`, so any draw can be reproduced without replaying
//! earlier ones. Normal variates use the Box–Muller transform on 53-bit
//! uniforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Stream namespaces; the purpose selects the high bits of the stream id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Corpus = 2,
    Render = 3,
    Shuffle = 4,
    Crop = 5,
    Probe = 6,
    Test = 7,
}

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) ^ index);
    rng
}

/// Uniform in `[0, 1)`.
pub fn uniform(rng: &mut StreamRng) -> f64 {
    rng.random::<f64>()
}

pub fn normal(rng: &mut StreamRng) -> f64 {
    // 1 - u lies in (0, 1], keeping the log finite
    let u1 = 1.0 - uniform(rng);
    let u2 = uniform(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform integer in `[lo, hi]`.
pub fn int_in(rng: &mut StreamRng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

pub fn randn(shape: &[usize], std: f64, rng: &mut StreamRng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = std * normal(rng);
    }
    t
}

pub fn shuffle<T>(items: &mut [T], rng: &mut StreamRng) {
    // Fisher–Yates with explicit draws so the permutation is fixed by the stream
    for i in (1..items.len()).rev() {
        let j = int_in(rng, 0, i);
        items.swap(i, j);
    }
}
