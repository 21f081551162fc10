//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator with explicit state. Purpose-specific
//! streams are derived from a root seed by hashing the purpose label, so adding
//! a new consumer (an extra evaluation pass, say) never shifts another stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed of the stream named `purpose` under `root`.
///
/// `derive_seed(root, "train")` is the documented root-to-stream mapping used
/// by the trainers and the CLI: `mix64(root ^ mix64(fnv1a(purpose)))`.
pub fn derive_seed(root: u64, purpose: &str) -> u64 {
    mix64(root ^ mix64(fnv1a(purpose)))
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn derived(root: u64, purpose: &str) -> Self {
        Self::new(derive_seed(root, purpose))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform index in `0..n`. Panics on `n == 0`; callers validate first.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.random_range(lo..hi)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// i.i.d. `N(0, sigma^2)` entries.
    pub fn sample_gaussian(&mut self, shape: &[usize], sigma: f64) -> Result<Tensor> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::Parameter(format!(
                "gaussian sigma must be finite and non-negative, got {sigma}"
            )));
        }
        let n: usize = shape.iter().product();
        // Draw even when sigma is zero so stream consumption does not depend on it.
        let data = (0..n).map(|_| sigma * self.standard_normal()).collect();
        Tensor::new(shape.to_vec(), data)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }
}
