//! Counter-based random streams derived from a master seed and a key.
//!
//! Every random draw in the lab comes from a stream identified by
//! `(master_seed, purpose, problem, rollout, step)`. Streams are derived by
//! hashing the key, so results do not depend on execution order or on how
//! many worker threads happen to run.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Identifies one stream under a master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey<'a> {
    pub purpose: &'a str,
    pub problem: u64,
    pub rollout: u64,
    pub step: u64,
}

impl<'a> StreamKey<'a> {
    pub fn new(purpose: &'a str, problem: u64, rollout: u64, step: u64) -> Self {
        Self {
            purpose,
            problem,
            rollout,
            step,
        }
    }
}

/// A reproducible random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

pub fn derive_stream(master_seed: u64, key: StreamKey<'_>) -> RngStream {
    let mut hasher = Sha256::new();
    hasher.update(b"mdm-lab/stream/v1");
    hasher.update(master_seed.to_le_bytes());
    hasher.update((key.purpose.len() as u64).to_le_bytes());
    hasher.update(key.purpose.as_bytes());
    hasher.update(key.problem.to_le_bytes());
    hasher.update(key.rollout.to_le_bytes());
    hasher.update(key.step.to_le_bytes());
    let seed: [u8; 32] = hasher.finalize().into();
    RngStream {
        inner: ChaCha8Rng::from_seed(seed),
    }
}

impl RngStream {
    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (`n > 0`).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire-style rejection keeps the draw unbiased.
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.inner.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}
