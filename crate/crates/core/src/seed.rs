//! Seed derivation.
//!
//! Every random stream of a run is keyed by `(seed, split index, purpose tag)`:
//!
//! ```text
//! h = splitmix64(seed)
//! h = splitmix64(h ^ split)
//! h = splitmix64(h ^ fnv1a64(purpose))
//! ```
//!
//! Purpose tags used by the harness: `dataset`, `holdout`, `init`, `batches`,
//! `noise` and `anneal`. Annealed iteration `t` uses the candidate-stream key
//! `splitmix64(derive_seed(seed, split, "anneal") ^ t)`.

/// One round of the SplitMix64 output function.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn derive_seed(seed: u64, split: usize, purpose: &str) -> u64 {
    let h = splitmix64(seed);
    let h = splitmix64(h ^ split as u64);
    splitmix64(h ^ fnv1a64(purpose))
}
