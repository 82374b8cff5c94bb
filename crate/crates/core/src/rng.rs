//! Deterministic, platform-stable RNG derivation.
//!
//! Every stochastic choice in the pipeline (FPS start points, token masks,
//! stochastic depth, batch shuffles, weight init) draws from a ChaCha stream
//! derived from the run seed plus a purpose tag, so runs replay bit-exactly
//! from the same seed.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep independent consumers on independent streams.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const EPOCH_SHUFFLE: u64 = 2;
    pub const PAIR_CHOICE: u64 = 3;
    pub const FPS_START: u64 = 4;
    pub const TOKEN_MASK: u64 = 5;
    pub const DROP_PATH: u64 = 6;
    pub const PROBE_SHOTS: u64 = 7;
    pub const GRAD_CHECK: u64 = 8;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive an independent RNG from a base seed and a list of tag words.
pub fn derive(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed ^ 0x75c4_7061_6e63_746f); // "puncto"-flavored salt
    for &t in tags {
        state = splitmix64(state ^ t);
    }
    let mut key = [0u8; 32];
    for chunk in 0..4 {
        state = splitmix64(state);
        key[chunk * 8..(chunk + 1) * 8].copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Truncated normal: resample until within two standard deviations.
pub fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Fisher-Yates shuffle of 0..n driven by the given RNG.
pub fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}
