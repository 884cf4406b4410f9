//! Seeded random streams.
//!
//! Every consumer of randomness draws from a ChaCha8 generator keyed by
//! `(seed, stream, index)`. The stream tag names the purpose (data, init,
//! dropout, probes, ...) and the index distinguishes repetitions within it
//! (step number, trial number). Two streams with different tags or indices
//! never share a keystream, so adding a consumer never shifts the draws of
//! another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Purpose tags for random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum Stream {
    Data = 1,
    Split = 2,
    Init = 3,
    Batch = 4,
    StudentNoise = 5,
    TeacherNoise = 6,
    Dropout = 7,
    Probe = 8,
    Direction = 9,
    Simulation = 10,
    Test = 11,
    Perturb = 12,
}

const INDEX_BITS: u32 = 48;

/// Generator for `(seed, stream, index)`. `index` must fit in 48 bits.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    debug_assert!(index < (1 << INDEX_BITS));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << INDEX_BITS) | (index & ((1 << INDEX_BITS) - 1)));
    rng
}

/// Fill a vector with i.i.d. standard normal draws.
pub fn standard_normal_vec<R: rand::Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Uniform direction on the unit sphere in `len` dimensions.
pub fn unit_sphere<R: rand::Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    loop {
        let mut v = standard_normal_vec(rng, len);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-300 {
            v.iter_mut().for_each(|x| *x /= norm);
            return v;
        }
    }
}
