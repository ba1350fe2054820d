// SPDX-License-Identifier: Apache-2.0

//! Hierarchical seed derivation: root -> component -> trial.
//!
//! Children are derived by hashing `(parent, label, index)` with SplitMix64,
//! so adding trials or components never shifts the seeds of existing ones.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed, a component label and an index.
pub fn derive(parent: u64, label: &str, index: u64) -> u64 {
    let mut h = splitmix64(parent);
    for b in label.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ index.wrapping_mul(0x2545_f491_4f6c_dd1d))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
