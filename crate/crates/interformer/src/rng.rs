//! Deterministic named random streams.
//!
//! All randomness flows from one root seed; independent sub-streams
//! (init, data, dropout, ...) are derived by hashing the stream label into
//! the seed, so toggling one consumer never perturbs another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::tensor::Tensor;

/// FNV-1a over the label bytes; cheap and stable across platforms.
fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// A named deterministic stream derived from `(seed, label)`.
pub struct StreamRng {
    inner: ChaCha12Rng,
}

impl StreamRng {
    pub fn new(seed: u64, label: &str) -> Self {
        Self {
            inner: ChaCha12Rng::seed_from_u64(seed ^ label_hash(label)),
        }
    }

    /// Sub-stream of this stream, e.g. per-sample or per-cell.
    pub fn derive(&self, seed_offset: u64, label: &str) -> Self {
        let mut probe = self.inner.clone();
        let base: u64 = probe.random();
        Self {
            inner: ChaCha12Rng::seed_from_u64(
                base.wrapping_add(seed_offset) ^ label_hash(label),
            ),
        }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.random_range(lo..hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.random_range(0.0..1.0) < p
    }

    pub fn fill_uniform(&mut self, buf: &mut [f64], lo: f64, hi: f64) {
        for v in buf.iter_mut() {
            *v = self.uniform(lo, hi);
        }
    }

    pub fn tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        self.fill_uniform(t.data_mut(), lo, hi);
        t
    }
}
