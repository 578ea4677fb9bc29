//! Deterministic random substreams.
//!
//! Every random draw in the pipeline comes from a ChaCha8 stream keyed by
//! `(master seed, stage, task)`. Tasks may run on any thread in any order
//! and still reproduce bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named pipeline stages; each owns a disjoint family of streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Simulate,
    Observe,
    Train,
    Calibrate,
    Infer,
    Metrics,
    Custom(u64),
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::Simulate => 0x53_49_4d,
            Stage::Observe => 0x4f_42_53,
            Stage::Train => 0x54_52_4e,
            Stage::Calibrate => 0x43_41_4c,
            Stage::Infer => 0x49_4e_46,
            Stage::Metrics => 0x4d_45_54,
            Stage::Custom(x) => 0x1000_0000 ^ x,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for task `task` of `stage` under master seed `seed`.
pub fn substream(seed: u64, stage: Stage, task: u64) -> Rng {
    let key = splitmix64(seed ^ splitmix64(stage.tag()));
    let mut bytes = [0u8; 32];
    for (i, chunk) in bytes.chunks_mut(8).enumerate() {
        chunk.copy_from_slice(&splitmix64(key.wrapping_add(i as u64)).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(bytes);
    rng.set_stream(task);
    rng
}

/// Plain seeded generator for callers that manage their own streams.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
