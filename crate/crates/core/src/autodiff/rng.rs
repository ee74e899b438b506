use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer, used to derive child keys.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic, splittable random stream.
///
/// Backed by ChaCha8, whose output is specified independently of the
/// platform. Child streams are derived from the parent's key, never from
/// its consumed state, so `derive(k)` is stable no matter how many values
/// the parent has already produced.
#[derive(Clone, Debug)]
pub struct SeedStream {
    key: u64,
    rng: ChaCha8Rng,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self {
            key: seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Child stream identified by `label`.
    pub fn derive(&self, label: u64) -> Self {
        Self::new(mix(
            self.key ^ mix(label.wrapping_add(0x5851_F42D_4C95_7F2D))
        ))
    }

    pub fn split(&self) -> (Self, Self) {
        (self.derive(0), self.derive(1))
    }

    /// Uniform draw in `[lo, hi)`; returns `lo` when the interval is empty.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        lo + (hi - lo) * self.rng.random::<f64>()
    }

    pub fn unit(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(rand_distr::StandardNormal)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for SeedStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Convenience constructor.
pub fn seeded_rng(seed: u64) -> SeedStream {
    SeedStream::new(seed)
}
