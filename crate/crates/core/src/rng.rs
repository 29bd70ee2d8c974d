use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for an independent stream keyed by `(base, stream, index)`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream) ^ index)
}

pub fn stream(base: u64, stream: u64, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(base, stream, index))
}

/// Stream tags, one per consumer, so adding draws in one place never shifts another.
pub mod tag {
    pub const SAMPLE: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const CUTMIX: u64 = 5;
    pub const PROTO_SAMPLE: u64 = 6;
    pub const KMEANS: u64 = 7;
    pub const EVAL_SAMPLE: u64 = 8;
}
