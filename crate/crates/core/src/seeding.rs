//! Counter-based seed splitting.
//!
//! Every random stream in a run is derived from the single master seed as
//! `derive_seed(master, stream, index)`, where `stream` names the consumer
//! (environment instance, path pool, minibatch shuffle, evaluation trial...)
//! and `index` is its counter. The mix is two rounds of SplitMix64, so the
//! derived seeds depend only on `(master, stream, index)` and never on the
//! order or the thread in which streams are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_ENV_INSTANCE: u64 = 1;
pub const STREAM_PATH_POOL: u64 = 2;
pub const STREAM_SHUFFLE: u64 = 3;
pub const STREAM_POLICY_INIT: u64 = 4;
pub const STREAM_EVAL_TRIAL: u64 = 5;
pub const STREAM_ABLATION: u64 = 6;
pub const STREAM_BENCH: u64 = 7;
pub const STREAM_ACTION_NOISE: u64 = 8;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)) ^ index)
}

pub fn rng_for(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}
