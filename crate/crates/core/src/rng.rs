use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Streams keep independent draws (leadfields, sources, noise, ...) from
/// sharing a generator when they derive from the same seed.
pub(crate) mod stream {
    pub const LABELS: u64 = 1;
    pub const LEADFIELD: u64 = 2;
    pub const SOURCES: u64 = 3;
    pub const NOISE: u64 = 4;
}

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finalizer, used to derive per-trial seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
