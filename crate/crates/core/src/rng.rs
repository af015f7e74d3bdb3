//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit seed or RNG. Independent
//! sub-streams are derived from a master seed with [`derive_seed`], so parallel
//! workers never share generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent seed for sub-stream `tag` of `master`.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    mix(mix(master) ^ tag.wrapping_mul(0xD605_BBB5_8C8A_BBCD))
}

pub fn derive_rng(master: u64, tag: u64) -> Rng {
    rng_from_seed(derive_seed(master, tag))
}

/// Hash a string tag into a stream id.
pub fn tag(name: &str) -> u64 {
    name.bytes().fold(0xCBF2_9CE4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01B3)
    })
}
