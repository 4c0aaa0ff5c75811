//! Counter-based deterministic randomness.
//!
//! A [`SeededRng`] is a pure function of `(seed, stream, counter)`: ChaCha keyed
//! by the seed, with the stream id selecting the nonce and the counter the
//! word position. Any generator can be reconstructed from those three numbers,
//! which is what checkpoints store.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

/// Purpose tags occupying the upper 32 bits of a stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum StreamPurpose {
    Init = 1,
    NodeTraining = 2,
    Split = 3,
    Synth = 4,
    Fault = 5,
    EvalBatch = 6,
    Probe = 7,
    Network = 8,
}

/// Stream id for `purpose` scoped to `index` (a node id, class, etc.).
pub fn stream_id(purpose: StreamPurpose, index: u32) -> u64 {
    ((purpose as u64) << 32) | index as u64
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha12Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng { seed, stream, inner }
    }

    /// Rebuilds a generator at a saved position.
    pub fn at(seed: u64, stream: u64, counter: u128) -> Self {
        let mut rng = SeededRng::new(seed, stream);
        rng.inner.set_word_pos(counter);
        rng
    }

    pub fn for_purpose(seed: u64, purpose: StreamPurpose, index: u32) -> Self {
        SeededRng::new(seed, stream_id(purpose, index))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `[0, n)`, uniformly without replacement, in
    /// draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} of {n} without replacement");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

impl PartialEq for SeededRng {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed && self.stream == other.stream && self.counter() == other.counter()
    }
}
