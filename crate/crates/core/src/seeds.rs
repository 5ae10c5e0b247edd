/// Derives an independent seed for a sub-stream (fold, bag, ...) from a
/// base seed, via splitmix64 mixing.
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    let mut h = base;
    for &s in stream {
        h = splitmix(h ^ splitmix(s.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
