//! Counter-based random streams.
//!
//! Every random draw in the simulator comes from a stream keyed by
//! `(seed, client, round, purpose)`, so a client's training noise does not
//! depend on how many draws other clients or phases made before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Stream = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Data = 2,
    Test = 3,
    Geometry = 4,
    Train = 5,
    Synth = 6,
    DpNoise = 7,
    Gradcheck = 8,
}

/// Opens the stream for `(seed, client, round, purpose)`.
pub fn stream(seed: u64, client: u64, round: u64, purpose: Purpose) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = splitmix(splitmix(splitmix(purpose as u64) ^ client) ^ round.rotate_left(32));
    rng.set_stream(id);
    rng
}

/// Derives a child seed; used when a component takes a plain `u64` seed.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    splitmix(seed ^ splitmix(salt))
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn normal(rng: &mut Stream) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec(rng: &mut Stream, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Fisher-Yates shuffle of `0..n`.
pub fn permutation(rng: &mut Stream, n: usize) -> Vec<usize> {
    use rand::Rng;
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut s = stream(1, 2, 3, Purpose::Train);
        let b: Vec<u64> = (0..4).map(|_| s.random()).collect();
        let mut s = stream(1, 2, 3, Purpose::Train);
        let c: Vec<u64> = (0..4).map(|_| s.random()).collect();
        assert_eq!(b, c);
        let mut other = stream(1, 3, 2, Purpose::Train);
        let d: Vec<u64> = (0..4).map(|_| other.random()).collect();
        assert_ne!(b, d);
        let mut other = stream(1, 2, 3, Purpose::Synth);
        let e: Vec<u64> = (0..4).map(|_| other.random()).collect();
        assert_ne!(b, e);
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut s = stream(9, 0, 0, Purpose::Train);
        let mut p = permutation(&mut s, 50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
