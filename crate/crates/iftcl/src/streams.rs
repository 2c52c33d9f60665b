//! Named deterministic randomness streams.
//!
//! Every random draw in the system comes from a ChaCha8 generator seeded by
//! the run's master seed mixed with a short stream label ("corpus", "masks",
//! "init", ...). Two runs with the same seed therefore consume identical
//! random sequences stream by stream, which is what makes end-to-end outputs
//! byte-identical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Derives a sub-seed for a named stream from the master seed.
///
/// FNV-1a over the label, mixed with the master seed through a splitmix64
/// finalizer. Stable across platforms and releases; changing it would break
/// reproducibility of recorded runs.
pub fn stream_seed(master: u64, label: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for a named stream.
pub fn stream_rng(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, label))
}

/// One zero-mean Gaussian sample with standard deviation `sigma`
/// (Box-Muller; u1 is pulled away from zero so the log stays finite).
pub fn gaussian<R: Rng>(rng: &mut R, sigma: f64) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
