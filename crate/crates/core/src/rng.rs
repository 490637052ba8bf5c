//! Seeded generators and the exponential draw used by every jump sampler.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Generator type used throughout the crate.
pub type SimRng = ChaCha8Rng;

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

/// One step of the splitmix64 mixer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replica `index` under `master`.
///
/// `splitmix64(splitmix64(master) ^ splitmix64(index + 1))`: distinct
/// indices give decorrelated seeds and the value depends on nothing else,
/// so replicas can be scheduled on any worker.
pub fn replica_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ splitmix64(index.wrapping_add(1)))
}

/// Generator for a given seed.
pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// Generator for replica `index` of an experiment seeded with `master`.
pub fn replica_rng(master: u64, index: u64) -> SimRng {
    rng_from_seed(replica_seed(master, index))
}

/// Uniform on `(0, 1)` from the top 53 bits of a 64-bit draw.
///
/// Zero is remapped to `2^-53`, the smallest positive value on the lattice.
pub fn open_uniform<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    let u = (rng.next_u64() >> 11) as f64 * TWO_POW_NEG_53;
    if u == 0.0 {
        TWO_POW_NEG_53
    } else {
        u
    }
}

/// `Exp(1)` by inversion, `-ln(1 - u)`, of a uniform `u` in `(0, 1)`.
///
/// Strictly positive for every admissible `u`.
pub fn unit_exponential_from_uniform(u: f64) -> f64 {
    -(-u).ln_1p()
}

/// Draws `E ~ Exp(1)` with `E > 0`.
pub fn unit_exponential<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    unit_exponential_from_uniform(open_uniform(rng))
}

/// Index `k` with probability `weights[k] / sum(weights)`.
///
/// Returns `None` when the weights have no positive mass.
pub fn categorical<R: RngCore + ?Sized>(rng: &mut R, weights: impl IntoIterator<Item = f64> + Clone) -> Option<usize> {
    let total: f64 = weights.clone().into_iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let target = open_uniform(rng) * total;
    let mut acc = 0.0;
    let mut last_positive = None;
    for (k, w) in weights.into_iter().enumerate() {
        if w > 0.0 {
            last_positive = Some(k);
            acc += w;
            if target < acc {
                return Some(k);
            }
        }
    }
    last_positive
}
