//! Seed derivation. Every random stream in the simulator is keyed by
//! `(master seed, purpose, index)`, so phases and clients never share a
//! stream and the order in which they run does not change their draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, purpose: &str, index: u64) -> u64 {
    let mut h = splitmix(master);
    for b in purpose.bytes() {
        h = splitmix(h ^ b as u64);
    }
    splitmix(h ^ splitmix(index))
}

pub fn stream(master: u64, purpose: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(master, purpose, index))
}
