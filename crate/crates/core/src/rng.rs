//! Seed derivation and the instrumentable per-sample random stream.
//!
//! Every stream is a ChaCha8 generator keyed by hashing a global seed with a
//! label and a tuple of integers, so independent consumers never share state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed, a label and integer coordinates into one 64-bit key.
pub fn derive_seed(seed: u64, label: &str, coords: &[u64]) -> u64 {
    // FNV-1a over the label, then splitmix over every component.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut key = splitmix64(seed ^ splitmix64(h));
    for &c in coords {
        key = splitmix64(key ^ splitmix64(c.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    key
}

pub fn stream(seed: u64, label: &str, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label, coords))
}

/// One recorded draw: the uniform interval it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Draw {
    pub lo: f64,
    pub hi: f64,
    pub value: f64,
}

/// Random stream owned by one training sample.
///
/// All draws are uniform. With `instrumented` set, every draw is logged so
/// tests can check which intervals a transform sampled from.
#[derive(Debug, Clone)]
pub struct SampleRng {
    rng: ChaCha8Rng,
    log: Option<Vec<Draw>>,
}

impl SampleRng {
    pub fn new(seed: u64, iteration: u64, sample_index: u64) -> Self {
        Self {
            rng: stream(seed, "augment", &[iteration, sample_index]),
            log: None,
        }
    }

    pub fn instrumented(seed: u64, iteration: u64, sample_index: u64) -> Self {
        Self {
            log: Some(Vec::new()),
            ..Self::new(seed, iteration, sample_index)
        }
    }

    /// Uniform on `[lo, hi)`; returns `lo` when the interval is empty.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u: f64 = self.rng.random();
        let value = lo + (hi - lo) * u;
        if let Some(log) = &mut self.log {
            log.push(Draw { lo, hi, value });
        }
        value
    }

    /// Uniform integer in `[0, n)`.
    pub fn uniform_index(&mut self, n: usize) -> usize {
        let v = self.uniform(0.0, n as f64).floor() as usize;
        v.min(n.saturating_sub(1))
    }

    pub fn draws(&self) -> &[Draw] {
        self.log.as_deref().unwrap_or(&[])
    }
}
