//! Deterministic seed derivation.
//!
//! All randomness in the crate flows from explicit `u64` seeds. Derived
//! streams (per-trajectory rollouts, per-turn retrieval, distractor slots)
//! mix their coordinates into the parent seed with a fixed integer hash, so
//! results are identical across platforms and across serial/parallel
//! execution orders.

/// SplitMix64 finalizer; a good 64-bit mixer with full avalanche.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold a list of coordinates into one seed. Order-sensitive: `[a, b]` and
/// `[b, a]` produce unrelated values.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut acc = 0x243F_6A88_85A3_08D3; // arbitrary non-zero start
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}
