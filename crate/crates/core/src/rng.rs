//! Deterministic randomness.
//!
//! Every random draw in the workspace flows through [`RngState`], a thin
//! wrapper over the ChaCha8 counter-based generator. One seed plus a stream
//! id fully determines a draw sequence, independent of platform; the word
//! position doubles as the draw counter and is what checkpoints persist.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const RNG_ALGORITHM: &str = "chacha8";

/// Stream ids for the fixed substreams a run derives from its seed.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const BACKBONE: u64 = 2;
    pub const ADAPTER: u64 = 3;
    pub const TRAIN: u64 = 4;
}

pub struct RngState {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

/// Serializable position of an [`RngState`], enough to resume the stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: u64,
    pub stream: u64,
    pub algorithm: String,
    /// 128-bit word position split for portable serialization.
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngState { seed, stream, rng }
    }

    /// Derives an independent substream sharing this generator's seed.
    pub fn substream(&self, stream: u64) -> Self {
        Self::with_stream(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of 32-bit words consumed so far.
    pub fn draw_count(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.gen()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn gaussian(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn gaussian_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian()).collect()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    pub fn snapshot(&self) -> RngSnapshot {
        let pos = self.rng.get_word_pos();
        RngSnapshot {
            seed: self.seed,
            stream: self.stream,
            algorithm: RNG_ALGORITHM.to_string(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(snap: &RngSnapshot) -> crate::Result<Self> {
        if snap.algorithm != RNG_ALGORITHM {
            return Err(crate::Error::Checkpoint(format!(
                "unknown rng algorithm {:?}",
                snap.algorithm
            )));
        }
        let mut state = Self::with_stream(snap.seed, snap.stream);
        let pos = ((snap.word_pos_hi as u128) << 64) | snap.word_pos_lo as u128;
        state.rng.set_word_pos(pos);
        Ok(state)
    }
}
