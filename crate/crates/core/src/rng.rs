//! Seeded random streams.
//!
//! Every run derives one ChaCha stream per participant from a single 64-bit
//! seed: stream 0 belongs to the server, stream `i + 1` to agent `i`. Streams
//! never share state, so a trajectory depends only on the seed and not on the
//! order in which agents happen to be evaluated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type StreamRng = ChaCha8Rng;

pub const SERVER_STREAM: u64 = 0;

pub fn stream(seed: u64, id: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn agent_stream(seed: u64, agent: usize) -> StreamRng {
    stream(seed, agent as u64 + 1)
}

/// Derives a child seed, for fanning a base seed out over independent
/// Monte Carlo trials or experiment replicas.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut rng = stream(seed, u64::MAX - index);
    rng.gen()
}

/// Uniform index in `0..k`.
pub fn sample_uniform<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::invalid("cannot sample from an empty range"));
    }
    Ok(rng.gen_range(0..k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_range_is_zero() {
        let mut r = stream(9, 0);
        assert!((0..100).all(|_| sample_uniform(&mut r, 1).unwrap() == 0));
        assert!(sample_uniform(&mut r, 0).is_err());
    }

    #[test]
    fn frequencies_are_uniform() {
        let mut r = stream(2024, 3);
        let mut counts = [0usize; 7];
        let draws = 1_000_000;
        for _ in 0..draws {
            counts[sample_uniform(&mut r, 7).unwrap()] += 1;
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 1.0 / 7.0).abs() < 0.01 / 7.0, "{counts:?}");
        }
    }

    #[test]
    fn identical_seeds_replay() {
        let a: Vec<usize> = {
            let mut r = stream(5, 1);
            (0..50).map(|_| sample_uniform(&mut r, 13).unwrap()).collect()
        };
        let b: Vec<usize> = {
            let mut r = stream(5, 1);
            (0..50).map(|_| sample_uniform(&mut r, 13).unwrap()).collect()
        };
        assert_eq!(a, b);
        let mut other = stream(5, 2);
        let c: Vec<usize> = (0..50).map(|_| sample_uniform(&mut other, 13).unwrap()).collect();
        assert_ne!(a, c);
    }
}
