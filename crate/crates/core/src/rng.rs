//! Seeded randomness.
//!
//! Every random draw in the crate goes through [`Rng`], a ChaCha20 stream
//! cipher used as a counter-based generator. A root seed selects the key and a
//! named path selects the 64-bit stream id, so `root.substream("adapter/add")`
//! is an independent, reproducible sequence regardless of how many draws other
//! streams have made.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut hash: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha20Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, FNV_OFFSET)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream keyed by `name`. Depends only on the seed and
    /// the path of names, never on draws already taken from `self`.
    pub fn substream(&self, name: &str) -> Rng {
        let stream = fnv1a(fnv1a(self.stream, b"/"), name.as_bytes());
        Self::with_stream(self.seed, stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        mean + std * z
    }

    /// Uniform index in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn normal_vec(&mut self, len: usize, std: f64) -> Vec<f64> {
        (0..len).map(|_| self.normal(0.0, std)).collect()
    }

    /// A point uniformly distributed on the sphere of the given radius.
    pub fn sphere(&mut self, dim: usize, radius: f64) -> Vec<f64> {
        loop {
            let v = self.normal_vec(dim, 1.0);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                return v.into_iter().map(|x| x * radius / norm).collect();
            }
        }
    }

    /// A point on the probability simplex drawn from a symmetric Dirichlet
    /// with concentration one (normalized exponentials).
    pub fn simplex(&mut self, dim: usize) -> Vec<f64> {
        let e: Vec<f64> = (0..dim).map(|_| -(1.0 - self.uniform()).ln()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
            assert_eq!(a.normal(0.0, 1.0).to_bits(), b.normal(0.0, 1.0).to_bits());
        }
    }

    #[test]
    fn substreams_ignore_parent_position() {
        let root = Rng::new(3);
        let mut advanced = root.clone();
        for _ in 0..17 {
            advanced.next_u64();
        }
        let mut x = root.substream("tool/add");
        let mut y = advanced.substream("tool/add");
        assert_eq!(x.next_u64(), y.next_u64());
    }

    #[test]
    fn distinct_names_distinct_streams() {
        let root = Rng::new(3);
        let a: Vec<u64> = (0..4).map({
            let mut r = root.substream("a");
            move |_| r.next_u64()
        }).collect();
        let b: Vec<u64> = (0..4).map({
            let mut r = root.substream("b");
            move |_| r.next_u64()
        }).collect();
        assert_ne!(a, b);
    }

    #[test]
    fn simplex_sums_to_one() {
        let mut r = Rng::new(1);
        for d in 1..10 {
            let s = r.simplex(d);
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(s.iter().all(|&x| x >= 0.0));
        }
    }
}
