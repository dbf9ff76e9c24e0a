//! Counter-based random number generator.
//!
//! Every draw is a pure function of `(seed, counter)`:
//!
//! ```text
//! x      = seed + (counter + 1) * 0x9E37_79B9_7F4A_7C15   (wrapping u64)
//! x      = (x ^ (x >> 30)) * 0xBF58_476D_1CE4_E5B9
//! x      = (x ^ (x >> 27)) * 0x94D0_49BB_1331_11EB
//! x      =  x ^ (x >> 31)
//! uniform = ((x >> 11) + 0.5) / 2^53                  in (0, 1), never 0 or 1
//! ```
//!
//! That is the SplitMix64 finalizer applied to a Weyl sequence. The whole
//! generator state is two integers, so decoder snapshots serialize it
//! trivially and any other implementation can reproduce a stream exactly.

use serde::{Deserialize, Serialize};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Raw 64-bit draw at an absolute counter position.
#[inline]
pub fn draw_u64(seed: u64, counter: u64) -> u64 {
    mix64(seed.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN)))
}

/// Uniform draw in the open interval (0, 1) at an absolute counter position.
#[inline]
pub fn draw_uniform(seed: u64, counter: u64) -> f64 {
    ((draw_u64(seed, counter) >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterRng {
    seed: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn at(seed: u64, counter: u64) -> Self {
        Self { seed, counter }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = draw_u64(self.seed, self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in (0, 1).
    pub fn uniform(&mut self) -> f64 {
        let v = draw_uniform(self.seed, self.counter);
        self.counter += 1;
        v
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift; the bias is < n / 2^64 and irrelevant here.
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Uniform in `[lo, hi)`.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller (consumes two draws).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_is_a_function_of_seed_and_counter() {
        let mut a = CounterRng::new(7);
        let seq: Vec<u64> = (0..10).map(|_| a.next_u64()).collect();
        let mut b = CounterRng::at(7, 4);
        assert_eq!(b.next_u64(), seq[4]);
        assert_eq!(draw_u64(7, 9), seq[9]);
    }

    #[test]
    fn known_values() {
        // SplitMix64 reference stream for seed 0.
        let mut r = CounterRng::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(r.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn uniform_is_open_interval() {
        let mut r = CounterRng::new(123);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!(u > 0.0 && u < 1.0);
        }
    }

    #[test]
    fn below_stays_in_range() {
        let mut r = CounterRng::new(5);
        for n in [1u64, 2, 3, 17, 1000] {
            for _ in 0..200 {
                assert!(r.below(n) < n);
            }
        }
    }
}
