//! Per-path random streams.
//!
//! Each path owns a ChaCha stream selected by the path index, under a key
//! derived from the master seed and a purpose tag. Paths can be generated in
//! any order, or regenerated later, with bit-identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Subordinator,
    Brownian,
    Auxiliary,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Subordinator => 0x5355_424f_5244_0001,
            Stream::Brownian => 0x4252_4f57_4e00_0002,
            Stream::Auxiliary => 0x4155_5849_4c00_0003,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn path_rng(seed: u64, stream: Stream, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ stream.tag()));
    rng.set_stream(path);
    rng
}
