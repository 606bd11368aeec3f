//! Deterministic seed derivation for independent random streams.

/// Mixes `base` with a path of indices into a well-spread 64-bit seed.
///
/// Used so that per-epoch, per-image and per-sample transform draws are
/// reproducible and independent of evaluation order.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut s = splitmix(base ^ 0x9e37_79b9_7f4a_7c15);
    for &p in path {
        s = splitmix(s ^ splitmix(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    s
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
