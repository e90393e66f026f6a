//! Seeded random streams.
//!
//! Every stochastic component draws from xoshiro256++ whose state is filled
//! by splitmix64 from a 64-bit seed. Child seeds for records, epochs and
//! other independent streams come from [`derive_seed`], so parallel
//! generation never depends on scheduling order.

use rand::{Rng, RngCore, SeedableRng};
use rand_xoshiro::{SplitMix64, Xoshiro256PlusPlus};

pub type Prng = Xoshiro256PlusPlus;

pub fn prng(seed: u64) -> Prng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// splitmix64 of `master` advanced by `index` golden-ratio increments.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut sm = SplitMix64::seed_from_u64(
        master.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    );
    sm.next_u64()
}

/// Uniform draw on [-1, 1] built from the top 53 bits of one output.
pub fn uniform_pm1(rng: &mut Prng) -> f64 {
    2.0 * rng.gen::<f64>() - 1.0
}

pub fn uniform_in(rng: &mut Prng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}
