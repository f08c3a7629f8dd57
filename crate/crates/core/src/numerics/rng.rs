use super::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Seeded, counter-based random stream.
///
/// Sub-streams derived with [`RngStream::split`] depend only on the parent seed
/// and the label, never on how many values the parent has already produced.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Draw position within the stream (number of 32-bit words consumed).
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Independent sub-stream for a (module, purpose) label.
    pub fn split(&self, label: &str) -> Self {
        Self::new(splitmix64(self.seed ^ splitmix64(fnv1a(label))))
    }

    /// Independent sub-stream for an indexed purpose (e.g. block `b`).
    pub fn split_indexed(&self, label: &str, index: u64) -> Self {
        Self::new(splitmix64(
            self.seed ^ splitmix64(fnv1a(label) ^ splitmix64(index.wrapping_add(1))),
        ))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal<T: Scalar>(&mut self) -> T {
        let x: f64 = self.inner.sample(StandardNormal);
        T::from_f64c(x)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn fill_normal<T: Scalar>(&mut self, out: &mut [T], std: f64) {
        for x in out {
            let z: f64 = self.inner.sample(StandardNormal);
            *x = T::from_f64c(z * std);
        }
    }

    pub fn normal_vec<T: Scalar>(&mut self, n: usize, std: f64) -> Vec<T> {
        let mut v = vec![T::zero(); n];
        self.fill_normal(&mut v, std);
        v
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
