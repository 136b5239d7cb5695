//! The toolkit-wide deterministic generator.
//!
//! Every random choice in the toolkit (candidate draws, dataset subsampling,
//! random preamble selection) goes through [`ToolkitRng`], so a seed fully
//! determines the outcome on every platform.
//!
//! Algorithm, so other implementations can replicate it:
//!
//! * Stream: ChaCha with 8 rounds, 256-bit key = the `u64` seed in
//!   little-endian order in bytes `0..8`, bytes `8..32` zero; nonce and
//!   stream position start at zero. `next_u64` consumes two consecutive
//!   32-bit output words, low word first.
//! * `below(n)`: Lemire's multiply-shift with rejection. Take `x = next_u64`,
//!   `m = x * n` as a 128-bit product; if `low64(m) < n`, compute
//!   `t = (2^64 - n) mod n` and redraw while `low64(m) < t`. Return `high64(m)`.
//! * `sample_indices(len, n)`: partial Fisher-Yates over `0..len`. For
//!   `i in 0..n`, `j = i + below(len - i)`, swap positions `i` and `j`;
//!   the first `n` positions are the sample, in draw order.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct ToolkitRng {
    inner: ChaCha8Rng,
}

impl ToolkitRng {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        Self {
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `0..bound`. `bound` must be positive.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "below() needs a positive bound");
        let mut m = u128::from(self.next_u64()) * u128::from(bound);
        if (m as u64) < bound {
            let threshold = bound.wrapping_neg() % bound;
            while (m as u64) < threshold {
                m = u128::from(self.next_u64()) * u128::from(bound);
            }
        }
        (m >> 64) as u64
    }

    pub fn index(&mut self, len: usize) -> usize {
        self.below(len as u64) as usize
    }

    /// `n` distinct indices from `0..len`, in draw order.
    pub fn sample_indices(&mut self, len: usize, n: usize) -> Vec<usize> {
        assert!(n <= len, "cannot draw {n} of {len} without replacement");
        let mut pool: Vec<usize> = (0..len).collect();
        for i in 0..n {
            let j = i + self.index(len - i);
            pool.swap(i, j);
        }
        pool.truncate(n);
        pool
    }
}

/// Convenience wrapper: `n` distinct indices from `0..len` under `seed`.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    ToolkitRng::new(seed).sample_indices(len, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Published test vectors, cross-checked against an independent ChaCha8
    // implementation (tests/oracles/chacha8.py). Every frozen selection
    // depends on these.
    const RAW_SEED_0: [u64; 4] = [
        15438444565445410878,
        11647726043916688255,
        4287315583106450476,
        2169171444139891480,
    ];
    const RAW_SEED_1: [u64; 4] = [
        7037237572835827407,
        5440448899038119230,
        14725191807199933458,
        16900043976841441594,
    ];
    const RAW_SEED_2: [u64; 4] = [
        18012057309059418233,
        2456201961108778341,
        7793916351658994445,
        17127440931138056997,
    ];
    const SAMPLE_10_3: [[usize; 3]; 3] = [[8, 6, 3], [3, 0, 8], [9, 2, 5]];

    #[test]
    fn raw_stream_matches_published_vectors() {
        for (seed, expected) in [(0u64, RAW_SEED_0), (1, RAW_SEED_1), (2, RAW_SEED_2)] {
            let mut rng = ToolkitRng::new(seed);
            let got: Vec<u64> = (0..4).map(|_| rng.next_u64()).collect();
            assert_eq!(got, expected, "seed {seed}");
        }
    }

    #[test]
    fn sampling_matches_published_vectors() {
        for seed in 0..3u64 {
            assert_eq!(sample_indices(10, 3, seed), SAMPLE_10_3[seed as usize].to_vec());
        }
    }

    #[test]
    fn below_stays_in_range_and_covers_it() {
        let mut rng = ToolkitRng::new(7);
        let mut seen = [false; 5];
        for _ in 0..1000 {
            let v = rng.below(5) as usize;
            assert!(v < 5);
            seen[v] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn full_sample_is_a_permutation() {
        let mut got = sample_indices(17, 17, 3);
        got.sort_unstable();
        assert_eq!(got, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn empty_sample() {
        assert!(sample_indices(5, 0, 1).is_empty());
    }
}
