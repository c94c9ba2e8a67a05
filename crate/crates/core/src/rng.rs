//! Deterministic seed derivation.
//!
//! Every random quantity in the crate flows from a single root seed, split
//! into independent streams by `(stream, counter)` pairs. Sampler blocks use
//! one stream each with the iteration number as counter, so a change in one
//! block's accept/reject path cannot desynchronize the randomness consumed by
//! another block.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// SplitMix64 finalizer; bijective on u64.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 32-byte ChaCha seed derived from `(root, stream, counter)`.
pub fn derive_seed(root: u64, stream: u64, counter: u64) -> [u8; 32] {
    let mut state = mix(root ^ mix(stream ^ mix(counter)));
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        state = mix(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    seed
}

/// A fresh generator for the given stream and counter.
pub fn stream_rng(root: u64, stream: u64, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(root, stream, counter))
}

/// A child root seed, for handing a whole sub-experiment its own seed space.
pub fn child_seed(root: u64, stream: u64, counter: u64) -> u64 {
    mix(root ^ mix(stream ^ mix(counter)))
}
