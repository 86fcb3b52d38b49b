//! Counter-based 64-bit generator for portable random masks.
//!
//! Every draw is a pure function of `(seed, step_index, counter)`:
//!
//! ```text
//! mix(z)   = z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
//!            z ^= z >> 27; z *= 0x94D049BB133111EB; z ^ (z >> 31)
//! key      = mix(seed ^ mix(step_index + GAMMA))
//! draw(i)  = mix(key + (i + 1) * GAMMA)
//! below(i, n) = (draw(i) * n) >> 64           (128-bit product)
//! ```
//!
//! with `GAMMA = 0x9E3779B97F4A7C15` and wrapping 64-bit arithmetic. `mix` is the
//! SplitMix64 finalizer.

pub const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64, step_index: u64) -> Self {
        Self {
            key: mix(seed ^ mix(step_index.wrapping_add(GAMMA))),
        }
    }

    #[inline]
    pub fn draw(&self, counter: u64) -> u64 {
        mix(self.key.wrapping_add(counter.wrapping_add(1).wrapping_mul(GAMMA)))
    }

    /// A value in `0..bound` (`bound > 0`) by multiply-shift.
    #[inline]
    pub fn below(&self, counter: u64, bound: u64) -> u64 {
        ((self.draw(counter) as u128 * bound as u128) >> 64) as u64
    }

    /// The first `k` entries of a Fisher–Yates shuffle of `0..n`.
    pub fn sample_indices(&self, n: usize, k: usize) -> Vec<usize> {
        let k = k.min(n);
        let mut order: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(i as u64, (n - i) as u64) as usize;
            order.swap(i, j);
        }
        order.truncate(k);
        order
    }
}
