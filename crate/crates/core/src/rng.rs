//! Counter-based Gaussian streams.
//!
//! Every normal draw is addressed by `(seed, path, step, channel)`. The seed keys a
//! ChaCha8 generator, the path index selects the ChaCha stream, and `(channel, step)`
//! select the word position, so any draw can be regenerated without replaying
//! the ones before it. One normal consumes two `u64` words (Box-Muller, cosine branch).

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Channel of the shared Brownian component (the one that also drives the observation).
pub const CH_SHARED: u32 = 0;
/// First channel of the independent signal noise.
pub const CH_SIGNAL: u32 = 1;
/// Channel offset used by reference-measure simulations.
pub const CH_REFERENCE: u32 = 16;
/// Channel offset reserved for the independent particle oracle.
pub const CH_ORACLE: u32 = 32;
/// Channel used for resampling uniforms.
pub const CH_RESAMPLE: u32 = 63;

const WORDS_PER_DRAW: u128 = 4;

fn word_position(channel: u32, step: u64) -> u128 {
    ((channel as u128) << 56) | (step as u128 * WORDS_PER_DRAW)
}

#[inline]
fn unit_open(bits: u64) -> f64 {
    // (0, 1]: never zero, so the logarithm below is finite
    ((bits >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn box_muller(a: u64, b: u64) -> f64 {
    let r = (-2.0 * unit_open(a).ln()).sqrt();
    r * (std::f64::consts::TAU * unit_open(b)).cos()
}

fn generator(seed: u64, path: u64, channel: u32, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng.set_word_pos(word_position(channel, step));
    rng
}

/// Standard normal draw at an explicit address.
pub fn normal_at(seed: u64, path: u64, step: u64, channel: u32) -> f64 {
    let mut rng = generator(seed, path, channel, step);
    let a = rng.next_u64();
    let b = rng.next_u64();
    box_muller(a, b)
}

/// Uniform draw in (0, 1] at an explicit address.
pub fn uniform_at(seed: u64, path: u64, step: u64, channel: u32) -> f64 {
    let mut rng = generator(seed, path, channel, step);
    let a = rng.next_u64();
    unit_open(a)
}

/// Sequential reader over the steps of one `(seed, path, channel)` substream.
///
/// Yields exactly the values `normal_at(seed, path, k, channel)` for `k = start, start+1, ...`.
pub struct NormalStream {
    rng: ChaCha8Rng,
}

impl NormalStream {
    pub fn new(seed: u64, path: u64, channel: u32) -> Self {
        Self::starting_at(seed, path, channel, 0)
    }

    pub fn starting_at(seed: u64, path: u64, channel: u32, step: u64) -> Self {
        Self { rng: generator(seed, path, channel, step) }
    }

    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        let a = self.rng.next_u64();
        let b = self.rng.next_u64();
        box_muller(a, b)
    }

    /// Brownian increments with variance `dt`.
    pub fn increments(&mut self, n: usize, dt: f64) -> Vec<f64> {
        let s = dt.sqrt();
        (0..n).map(|_| s * self.next_normal()).collect()
    }
}

/// SplitMix64 finalizer; derives unrelated seeds from one base seed.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
