//! Deterministic per-run seeds.
//!
//! `derive_seed` folds the master seed and the cell indices through the
//! SplitMix64 finalizer, then mixes in the run index last. The finalizer is
//! a bijection on `u64`, so distinct run indices within one cell can never
//! collide.

/// SplitMix64 finalizer (Steele, Lea and Flood).
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for run `run` of the cell addressed by `cell` under `master`.
pub fn derive_seed(master: u64, cell: &[u64], run: u64) -> u64 {
    let mut h = mix64(master);
    for &c in cell {
        h = mix64(h ^ mix64(c));
    }
    mix64(h ^ run)
}
