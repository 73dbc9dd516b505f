//! Reproducible random streams.
//!
//! A stream is identified by `(seed, stream_index)` and backed by ChaCha8
//! with the stream index as the ChaCha stream id, so distinct indices give
//! independent sequences and a given pair always replays the same draws.
//! The top bit of the stream id is reserved for the auxiliary (site colour)
//! stream of the same sample.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const AUX_BIT: u64 = 1 << 63;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStreamSpec {
    pub seed: u64,
    pub stream_index: u64,
}

impl RngStreamSpec {
    pub fn new(seed: u64, stream_index: u64) -> Self {
        debug_assert!(stream_index < AUX_BIT, "stream index uses the reserved bit");
        Self { seed, stream_index }
    }

    pub fn rng(&self) -> StreamRng {
        StreamRng::from_parts(self.seed, self.stream_index & !AUX_BIT)
    }

    /// Second independent stream tied to the same sample.
    pub fn aux_rng(&self) -> StreamRng {
        StreamRng::from_parts(self.seed, self.stream_index | AUX_BIT)
    }
}

pub struct StreamRng(ChaCha8Rng);

impl StreamRng {
    fn from_parts(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform on (0, 1].
    #[inline]
    pub fn uniform_open0(&mut self) -> f64 {
        ((self.0.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on [0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `0..n` (`n > 0`), by rejection.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.0.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }
}

/// Draws the gap between successes of an i.i.d. Bernoulli(p) sequence:
/// the number of failures before the next success.
#[derive(Clone, Copy, Debug)]
pub struct GeometricSkip {
    p: f64,
    inv_log_q: f64,
}

impl GeometricSkip {
    pub fn new(p: f64) -> Self {
        let inv_log_q = if p > 0.0 && p < 1.0 { 1.0 / (-p).ln_1p() } else { 0.0 };
        Self { p, inv_log_q }
    }

    #[inline]
    pub fn draw(&self, rng: &mut StreamRng) -> usize {
        if self.p >= 1.0 {
            return 0;
        }
        if self.p <= 0.0 {
            return usize::MAX;
        }
        let g = rng.uniform_open0().ln() * self.inv_log_q;
        if g >= usize::MAX as f64 {
            usize::MAX
        } else {
            g as usize
        }
    }
}
