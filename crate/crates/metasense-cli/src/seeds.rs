//! Stable seed derivation: every random stream of a plan (layouts,
//! calibration, training, evaluation, baselines) gets an independent,
//! reproducible seed from (base seed, realization index, role string).

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

pub fn derive_seed(base: u64, realization: usize, role: &str) -> u64 {
    splitmix64(splitmix64(base ^ fnv1a(role.as_bytes())) ^ realization as u64)
}
