//! Seeded random streams.
//!
//! Parallel estimators never share a generator. Instead a parent stream is
//! [`split`](RngStream::split) into a [`Substreams`] family whose members are
//! addressed by replicate index, so a result depends only on the seed and the
//! replicate count, never on how the replicates were scheduled.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Draws a fresh key from this stream and returns the family of
    /// independent substreams it addresses.
    pub fn split(&mut self) -> Substreams {
        let mut key = [0u8; 32];
        self.rng.fill_bytes(&mut key);
        Substreams { key }
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.rng.sample(StandardNormal);
        }
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Substreams {
    key: [u8; 32],
}

impl Substreams {
    pub fn stream(&self, index: u64) -> RngStream {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(index);
        RngStream { rng }
    }
}
