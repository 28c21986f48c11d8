//! Counter-based splittable pseudorandom number generator.
//!
//! A stream is a (key, counter) pair; the i-th output is a strong 64-bit
//! mix of the key and the counter, so streams can be split without sharing
//! state: `substream(i)` derives an independent key by folding `i` into the
//! parent key. Trajectories, dataset items, and batch slots each own a
//! substream, which keeps every pipeline stage deterministic under a single
//! base seed regardless of thread scheduling.

use std::f64::consts::TAU;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
const FOLD: u64 = 0xd1b5_4a32_d192_ed03;

/// 64-bit finalizer with strong avalanche.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A splittable counter-based random stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream {
            key: mix64(seed ^ GOLDEN),
            counter: 0,
        }
    }

    /// Derives an independent stream for the given index. Substreams of
    /// distinct indices (and their own substreams) do not overlap.
    pub fn substream(&self, index: u64) -> Stream {
        Stream {
            key: mix64(self.key ^ mix64(index.wrapping_mul(FOLD).wrapping_add(GOLDEN))),
            counter: 0,
        }
    }

    /// Raw (key, counter) state, for checkpointing.
    pub fn state(&self) -> (u64, u64) {
        (self.key, self.counter)
    }

    pub fn from_state(key: u64, counter: u64) -> Self {
        Stream { key, counter }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1], used where log(0) must be avoided.
    #[inline]
    fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // Modulo bias is < n / 2^64, irrelevant for the n used here.
        self.next_u64() % n
    }

    /// One standard-normal draw (Box-Muller; consumes two uniforms).
    pub fn next_gaussian(&mut self) -> f64 {
        let r = (-2.0 * self.next_f64_open().ln()).sqrt();
        let theta = TAU * self.next_f64();
        r * theta.cos()
    }

    /// Fills `out` with i.i.d. standard-normal values, two per Box-Muller
    /// transform so the stream advances by exactly `out.len().div_ceil(2) * 2`
    /// pairs of uniforms.
    pub fn fill_gaussian(&mut self, out: &mut [f64]) {
        let mut i = 0;
        while i + 1 < out.len() {
            let r = (-2.0 * self.next_f64_open().ln()).sqrt();
            let theta = TAU * self.next_f64();
            out[i] = r * theta.cos();
            out[i + 1] = r * theta.sin();
            i += 2;
        }
        if i < out.len() {
            out[i] = self.next_gaussian();
        }
    }
}
