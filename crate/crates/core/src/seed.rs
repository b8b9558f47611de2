//! Named seed derivation. Every random stream in the crate is obtained from a
//! base seed plus a purpose string and an index, so results never depend on the
//! order in which streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit derivation of `(base, purpose, index)`.
pub fn derive_seed(base: u64, purpose: &str, index: u64) -> u64 {
    // FNV-1a over the purpose string
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(splitmix64(base ^ h).wrapping_add(splitmix64(index)))
}

pub fn rng_for(base: u64, purpose: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(base, purpose, index))
}
