//! Counter-based seed splitting.
//!
//! Every random stream is derived from one declared root seed, a stream
//! label and a counter:
//!
//! ```text
//! key   = fnv1a64(label)
//! seed  = splitmix64(splitmix64(root ^ key) ^ splitmix64(counter))
//! rng   = ChaCha8Rng::seed_from_u64(seed)
//! ```
//!
//! Streams with different labels or counters are independent, and a stream
//! can be reconstructed without replaying any other stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn fnv1a64(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn derive_seed(root: u64, label: &str, counter: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a64(label)) ^ splitmix64(counter))
}

pub fn stream(root: u64, label: &str, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label, counter))
}
