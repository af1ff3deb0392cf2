//! Keyed, counter-based randomness.
//!
//! Every stream is identified by `(seed, frame index, purpose tag)`. The key
//! is hashed into a ChaCha20 key, so a stream's output is a function of its
//! key and position only. Drawing from one stream never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeededRng {
    seed: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, frame: u64, purpose: &str) -> NoiseStream {
        let mut h = Sha256::new();
        h.update(b"toonshade.rng.v1");
        h.update(self.seed.to_le_bytes());
        h.update(frame.to_le_bytes());
        h.update((purpose.len() as u64).to_le_bytes());
        h.update(purpose.as_bytes());
        let key: [u8; 32] = h.finalize().into();
        NoiseStream {
            inner: ChaCha20Rng::from_seed(key),
        }
    }
}

pub struct NoiseStream {
    inner: ChaCha20Rng,
}

impl NoiseStream {
    pub fn next_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn fill_normal(&mut self, out: &mut [f32]) {
        for v in out {
            *v = self.next_normal() as f32;
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        rand::RngCore::next_u64(&mut self.inner)
    }
}
