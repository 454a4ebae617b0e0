//! Seed derivation.
//!
//! Every random stream is a ChaCha8 generator seeded from the root seed and
//! a fixed tuple of coordinates:
//!
//! ```text
//! seed = mix(mix(mix(mix(root ^ DOMAIN[purpose]) ^ a) ^ b) ^ c)
//! ```
//!
//! where `mix` is the SplitMix64 finalizer. Coordinates are typically
//! (client, task, round). The derivation uses only 64-bit integer
//! arithmetic, so streams are identical across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// What a derived stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    GlobalInit,
    HeadInit,
    Data,
    ClientSampling,
    KbSampling,
    Shuffle,
    Fisher,
    Harness,
}

impl Purpose {
    fn domain(self) -> u64 {
        match self {
            Purpose::GlobalInit => 0x01,
            Purpose::HeadInit => 0x02,
            Purpose::Data => 0x03,
            Purpose::ClientSampling => 0x04,
            Purpose::KbSampling => 0x05,
            Purpose::Shuffle => 0x06,
            Purpose::Fisher => 0x07,
            Purpose::Harness => 0x08,
        }
    }
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, purpose: Purpose, a: u64, b: u64, c: u64) -> u64 {
    let mut s = splitmix64(root ^ purpose.domain().wrapping_mul(0xA24B_AED4_963E_E407));
    for x in [a, b, c] {
        s = splitmix64(s ^ x);
    }
    s
}

pub fn rng_for(root: u64, purpose: Purpose, a: u64, b: u64, c: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(root, purpose, a, b, c))
}
