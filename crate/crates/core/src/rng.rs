//! Named random substreams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Independent generator for `purpose` (e.g. "init", "data", "dropout", "mask").
pub fn substream(root: u64, purpose: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(fnv1a(purpose));
    rng
}

/// Seed for the `index`-th item of a purpose, stable across thread schedules.
pub fn derive_seed(root: u64, purpose: &str, index: u64) -> u64 {
    let mut x = root ^ fnv1a(purpose) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    // splitmix64 finaliser
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
