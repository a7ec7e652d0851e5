//! Seeded randomness with serializable state and per-item derived streams.
//!
//! Every stochastic component in the crate draws through [`SeedRng`] so that
//! training runs are reproducible and checkpoints can capture the exact
//! generator position. Derived streams (`fork`) decouple per-clip randomness
//! from iteration order, which keeps parallel corpus work seed-stable.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Deterministic generator: ChaCha8 with an explicitly tracked position.
#[derive(Clone, Debug)]
pub struct SeedRng {
    inner: ChaCha8Rng,
}

/// Serializable snapshot of a [`SeedRng`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl SeedRng {
    pub fn from_seed(seed: u64) -> Self {
        SeedRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream derived from a base seed and a label such as a clip id.
    /// The mapping is a fixed integer mix, stable across platforms.
    pub fn derive(base_seed: u64, label: u64) -> Self {
        SeedRng::from_seed(splitmix64(base_seed ^ splitmix64(label)))
    }

    /// Child generator that advances this one by a single draw.
    pub fn fork(&mut self) -> Self {
        SeedRng::from_seed(self.inner.next_u64())
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.inner.get_seed(),
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn restore(state: &RngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        SeedRng { inner }
    }

    /// Standard normal draw, always sampled at f64 so f32 and f64 model modes
    /// consume identical generator positions.
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.inner.gen_range(0..n)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}

/// SplitMix64 finalizer; used for platform-stable seed derivation.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}
