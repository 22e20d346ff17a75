//! Keyed, counter-based random number generation.
//!
//! Everything random in this crate is drawn from ChaCha8 streams addressed by
//! `(seed, stream id)`. ChaCha is a counter-mode stream cipher, so a stream is
//! fully determined by its key and id: corpora, parameter initialization,
//! feature masking, and batch shuffles are all reproducible from the seed
//! alone, and independent streams can be consumed in parallel.
//!
//! Derivations used by the rest of the crate:
//! - key = 32 bytes expanded from the 64-bit seed with SplitMix64,
//! - stream id = `mix2`/`mix3` of a purpose tag and the indices involved
//!   (sample id, training step, ...),
//! - Gaussians come from Box-Muller over explicit 53-bit uniforms, so the
//!   whole pipeline is re-implementable from this description.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; used both for key expansion and for combining
/// indices into stream ids.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combine two 64-bit values into one stream id.
pub fn mix2(a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(a) ^ b.wrapping_mul(0xA24B_AED4_963E_E407))
}

/// Combine three 64-bit values into one stream id.
pub fn mix3(a: u64, b: u64, c: u64) -> u64 {
    mix2(mix2(a, b), c)
}

/// Purpose tags keeping unrelated streams apart.
pub mod purpose {
    pub const CORPUS: u64 = 0x01;
    pub const INIT: u64 = 0x02;
    pub const MASK: u64 = 0x03;
    pub const SHUFFLE: u64 = 0x04;
    pub const KMEANS: u64 = 0x05;
    pub const GRADCHECK: u64 = 0x06;
}

/// One addressed ChaCha8 stream.
pub struct KeyedRng {
    inner: ChaCha8Rng,
    spare_gaussian: Option<f64>,
}

impl KeyedRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        let mut s = seed;
        for chunk in key.chunks_exact_mut(8) {
            s = splitmix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(stream);
        Self { inner, spare_gaussian: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). Multiply-shift bounding; the bias is below
    /// n / 2^64 and irrelevant at our ranges.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }

    /// Standard normal via Box-Muller; the second draw of each pair is cached.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_gaussian.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_gaussian = Some(r * theta.sin());
        r * theta.cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }

    /// Index drawn proportionally to the given non-negative weights. Falls
    /// back to uniform when all weights are zero.
    pub fn sample_weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return self.below(weights.len() as u64) as usize;
        }
        let target = self.uniform() * total;
        let mut acc = 0.0;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if target < acc {
                return i;
            }
        }
        weights.len() - 1
    }
}
