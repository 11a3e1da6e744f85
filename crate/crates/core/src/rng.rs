//! Reproducible random streams keyed by `(seed, index, purpose)`.
//!
//! Every random quantity in the crate is drawn from a stream derived only
//! from these keys, so results do not depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Data,
    Weights,
    Oracle,
    BootstrapSeed,
}

impl Purpose {
    fn code(self) -> u64 {
        match self {
            Purpose::Data => 0x11,
            Purpose::Weights => 0x22,
            Purpose::Oracle => 0x33,
            Purpose::BootstrapSeed => 0x44,
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes the keys into a single 64-bit value.
pub fn derive(seed: u64, index: u64, purpose: Purpose) -> u64 {
    let mut s = seed;
    let a = splitmix64(&mut s);
    let mut s = a ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    let b = splitmix64(&mut s);
    let mut s = b ^ purpose.code();
    splitmix64(&mut s)
}

pub fn stream(seed: u64, index: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut s = derive(seed, index, purpose);
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
