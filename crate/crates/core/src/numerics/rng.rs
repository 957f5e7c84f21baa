use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Hierarchical RNG key: a seed plus a path of labelled integers such as
/// `seed → ("phase", 2) → ("class", 3) → ("index", 17)`.
///
/// The stream for a key depends only on the key, so jobs can run in any
/// order or on any thread and still draw identical samples.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngKey {
    seed: u64,
    path: Vec<(String, u64)>,
}

impl RngKey {
    pub fn new(seed: u64) -> Self {
        RngKey { seed, path: Vec::new() }
    }

    pub fn child(&self, label: &str, value: u64) -> Self {
        let mut path = self.path.clone();
        path.push((label.to_owned(), value));
        RngKey { seed: self.seed, path }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[(String, u64)] {
        &self.path
    }

    pub fn stream(&self) -> KeyedRng {
        rng_stream(self)
    }

    fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"loft-rng-v1");
        h.update(self.seed.to_le_bytes());
        for (label, value) in &self.path {
            h.update((label.len() as u32).to_le_bytes());
            h.update(label.as_bytes());
            h.update(value.to_le_bytes());
        }
        h.finalize().into()
    }
}

impl std::fmt::Display for RngKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.seed)?;
        for (label, value) in &self.path {
            write!(f, "/{label}={value}")?;
        }
        Ok(())
    }
}

/// ChaCha8 keystream seeded from the SHA-256 digest of an [`RngKey`].
#[derive(Clone, Debug)]
pub struct KeyedRng(ChaCha8Rng);

pub fn rng_stream(key: &RngKey) -> KeyedRng {
    KeyedRng(ChaCha8Rng::from_seed(key.digest()))
}

impl KeyedRng {
    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    pub fn normal_f32(&mut self) -> f32 {
        StandardNormal.sample(&mut self.0)
    }

    pub fn fill_normal(&mut self, out: &mut [f32]) {
        for x in out {
            *x = self.normal_f32();
        }
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift with rejection.
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.0.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    /// Draw from the symmetric `Beta(alpha, alpha)`.
    pub fn beta_symmetric(&mut self, alpha: f64) -> f64 {
        Beta::new(alpha, alpha).expect("alpha > 0").sample(&mut self.0)
    }

    /// Fisher–Yates partial shuffle: `count` distinct indices from `0..n`.
    pub fn choose_distinct(&mut self, n: usize, count: usize) -> Vec<usize> {
        assert!(count <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(count);
        pool
    }
}

impl RngCore for KeyedRng {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}
