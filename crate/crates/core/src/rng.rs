//! Deterministic random streams.
//!
//! A [`RandomStream`] wraps a counter-based generator seeded from a 64-bit
//! value. Streams can be split by label into independent substreams, so
//! data-parallel work can draw per-sample noise without coordinating on a
//! shared cursor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

pub struct RandomStream {
    base_seed: u64,
    rng: ChaCha8Rng,
}

// FNV-1a, fixed here so substream derivation never depends on std's hasher.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl RandomStream {
    pub fn seed(seed: u64) -> Self {
        RandomStream {
            base_seed: seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derive an independent substream. The child depends only on the base
    /// seed and the label, never on how much the parent has drawn.
    pub fn split(&self, label: &str) -> Self {
        let mut bytes = Vec::with_capacity(8 + label.len());
        bytes.extend_from_slice(&self.base_seed.to_le_bytes());
        bytes.extend_from_slice(label.as_bytes());
        RandomStream::seed(fnv1a64(&bytes))
    }

    /// Substream indexed by an integer, for per-sample parallelism.
    pub fn split_index(&self, index: u64) -> Self {
        self.split(&format!("#{index}"))
    }

    pub fn base_seed(&self) -> u64 {
        self.base_seed
    }

    /// Standard-normal draw.
    pub fn normal(&mut self) -> f32 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f32 {
        self.rng.random::<f32>()
    }

    pub fn uniform_usize(&mut self, bound: usize) -> usize {
        self.rng.random_range(0..bound)
    }

    pub fn normal_tensor(&mut self, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.normal()).collect();
        Tensor::new(shape, data).expect("shape/data consistent by construction")
    }

    /// He-style normal draw with the given standard deviation.
    pub fn normal_scaled(&mut self, std: f32) -> f32 {
        self.normal() * std
    }

    /// `count` distinct values from `0..bound`, ascending.
    pub fn distinct_indices(&mut self, count: usize, bound: usize) -> Vec<usize> {
        assert!(count <= bound, "cannot draw {count} distinct from {bound}");
        // Floyd's algorithm keeps this O(count) draws.
        let mut chosen = std::collections::BTreeSet::new();
        for j in (bound - count)..bound {
            let t = self.uniform_usize(j + 1);
            if !chosen.insert(t) {
                chosen.insert(j);
            }
        }
        chosen.into_iter().collect()
    }
}
