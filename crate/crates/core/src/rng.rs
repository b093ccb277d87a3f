//! Replayable random streams.
//!
//! Every random draw in the crate comes from a [`StreamRng`]: ChaCha8 keyed by
//! a 64-bit seed (expanded with `SeedableRng::seed_from_u64`) and positioned on
//! a 64-bit stream id. ChaCha is a counter-based generator, so a stream is a
//! pure function of `(seed, stream, word position)` on every platform.
//!
//! Draw conventions, fixed so that sequences can be replayed independently:
//!
//! * `next_f64`: top 53 bits of one `u64` word, scaled by 2^-53, in `[0, 1)`.
//! * `below(n)`: high 64 bits of the 128-bit product `word * n`.
//! * `shuffle`: Fisher-Yates from the last index down, `j = below(i + 1)`.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct StreamRng {
    inner: ChaCha8Rng,
}

impl StreamRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        StreamRng { inner }
    }

    /// Stream identified by a label, e.g. `StreamRng::labeled(seed, "shuffle")`.
    pub fn labeled(seed: u64, label: &str) -> Self {
        Self::new(seed, fnv1a(label.as_bytes()))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Per-example seed: `seed XOR fnv1a(doc_id 0x00 index_le)`.
pub fn example_seed(seed: u64, doc_id: &str, index: usize) -> u64 {
    let mut bytes = Vec::with_capacity(doc_id.len() + 9);
    bytes.extend_from_slice(doc_id.as_bytes());
    bytes.push(0);
    bytes.extend_from_slice(&(index as u64).to_le_bytes());
    seed ^ fnv1a(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_replayable() {
        let mut a = StreamRng::new(7, 3);
        let mut b = StreamRng::new(7, 3);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = StreamRng::new(7, 4);
        let mut a = StreamRng::new(7, 3);
        assert_ne!(a.next_u64(), c.next_u64());
    }

    #[test]
    fn uniform_draws_in_range() {
        let mut r = StreamRng::new(1, 0);
        for _ in 0..1000 {
            let u = r.next_f64();
            assert!((0.0..1.0).contains(&u));
            assert!(r.below(7) < 7);
        }
    }

    #[test]
    fn fnv_known_vectors() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut xs: Vec<u32> = (0..50).collect();
        StreamRng::new(9, 1).shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(xs, sorted);
    }
}
