//! Deterministic per-replicate random streams.
//!
//! Every replicate owns independent ChaCha streams keyed by
//! `(master_seed, replicate_index, purpose)`, so results never depend on
//! how replicates are scheduled across workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Separate purposes never share state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamPurpose {
    Cohort,
    Matching,
    Auxiliary,
}

impl StreamPurpose {
    fn tag(self) -> u64 {
        match self {
            StreamPurpose::Cohort => 0x436f_686f_7274,
            StreamPurpose::Matching => 0x4d61_7463_6800,
            StreamPurpose::Auxiliary => 0x4175_7800_0000,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn replicate_rng(master_seed: u64, replicate_index: u64, purpose: StreamPurpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(master_seed ^ purpose.tag()));
    rng.set_stream(replicate_index);
    rng
}
