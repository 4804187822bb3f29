use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer. Bijective, good avalanche; used only to
/// spread seed material, never as the generator itself.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent generator from a root seed and a path of
/// tags (split id, class id, tile index, ...). Equal inputs give the
/// same stream on every platform; any differing tag decorrelates it.
pub fn derive_rng(root: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut s = mix64(root ^ 0x51a2_c4b7_9e6d_3f08);
    for &t in tags {
        s = mix64(s ^ mix64(t));
    }
    let mut seed = [0u8; 32];
    let mut x = s;
    for chunk in seed.chunks_mut(8) {
        x = mix64(x);
        chunk.copy_from_slice(&x.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
