//! Counter-based noise streams.
//!
//! Every stream is a ChaCha8 keystream addressed by a 256-bit key and a
//! 64-bit stream id. Keys are derived from the experiment seed plus a list of
//! coordinates (outer path, node, ...) through splitmix64, so the numbers a
//! path sees depend only on its coordinates and never on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Identifies a family of independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey {
    words: [u64; 4],
}

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        Self::derive(seed, &[])
    }

    /// Key for the sub-family addressed by `coords` (e.g. `[outer_path, node]`).
    pub fn derive(seed: u64, coords: &[u64]) -> Self {
        let mut acc = splitmix64(seed ^ 0x5eed_0000_0000_0001);
        for (i, &c) in coords.iter().enumerate() {
            acc = splitmix64(acc ^ splitmix64(c.wrapping_add((i as u64 + 1).wrapping_mul(GOLDEN))));
        }
        let mut words = [0u64; 4];
        let mut z = acc;
        for w in words.iter_mut() {
            z = splitmix64(z);
            *w = z;
        }
        Self { words }
    }

    pub fn stream(&self, id: u64) -> ChaCha8Rng {
        let mut bytes = [0u8; 32];
        for (chunk, w) in bytes.chunks_exact_mut(8).zip(self.words.iter()) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(bytes);
        rng.set_stream(id);
        rng
    }

    /// Fills `out` with N(0, dt) increments for stream `id`; `mirror` negates them.
    pub fn fill_increments(&self, id: u64, dt: f64, mirror: bool, out: &mut [f64]) {
        let mut rng = self.stream(id);
        let scale = if mirror { -dt.sqrt() } else { dt.sqrt() };
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = scale * z;
        }
    }
}
