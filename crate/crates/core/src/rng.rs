//! Seeded, reproducible random streams.
//!
//! Everything random in a run (weight init, latent noise, augmentation,
//! shuffling, synthetic data) draws from ChaCha8 streams derived from the
//! run seed, so identical seeds give identical runs.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::real::Real;
use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Stream `stream` of the generator keyed by `seed`. Distinct streams of
/// one seed do not overlap.
pub fn substream(seed: u64, stream: u64) -> Rng {
    let mut r = seeded_rng(seed);
    r.set_stream(stream);
    r
}

/// Splits off a child generator whose key is drawn from `parent`.
pub fn fork(parent: &mut Rng, stream: u64) -> Rng {
    let mut key = [0u8; 32];
    parent.fill_bytes(&mut key);
    let mut child = Rng::from_seed(key);
    child.set_stream(stream);
    child
}

/// Complete position of a [`Rng`], enough to resume it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub key: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        Self {
            key: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        let mut r = Rng::from_seed(self.key);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

/// Tensor of independent standard normal draws.
pub fn normal_tensor<T: Real>(rng: &mut Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        T::of(v)
    })
}

/// Tensor of independent `U(-bound, bound)` draws.
pub fn uniform_tensor<T: Real>(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    use rand::Rng as _;
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)))
}
