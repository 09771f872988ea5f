//! Counter-based random streams.
//!
//! Every random draw in the engine is keyed by a stream id plus a
//! `(epoch, step, layer)` triple. The key is expanded into a ChaCha8 seed,
//! so a draw never depends on how many other draws happened before it or on
//! which thread performed them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Identifies one mask draw: the training epoch, the step inside that epoch,
/// and the drop site (layer) within the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct DrawId {
    pub epoch: u64,
    pub step: u64,
    pub layer: u64,
}

impl DrawId {
    pub fn new(epoch: u64, step: u64, layer: u64) -> Self {
        Self { epoch, step, layer }
    }

    pub fn with_layer(self, layer: u64) -> Self {
        Self { layer, ..self }
    }
}

/// Well-separated stream ids for the different consumers of randomness.
pub mod streams {
    pub const INIT: u64 = 0x1d17_0000_0000_0001;
    pub const SHUFFLE: u64 = 0x5afe_0000_0000_0002;
    pub const AUGMENT: u64 = 0xa06e_0000_0000_0003;
    pub const SYNTH: u64 = 0x5e7d_0000_0000_0004;
    pub const PROBE: u64 = 0x9b0b_0000_0000_0005;
    pub const MASK: u64 = 0xd409_0000_0000_0006;
}

/// Derive a stream id from a user seed and a consumer tag.
pub fn stream_for(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// A ChaCha8 generator positioned at the start of the stream keyed by
/// `(stream, draw)`.
pub fn keyed_rng(stream: u64, draw: DrawId) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&stream.to_le_bytes());
    seed[8..16].copy_from_slice(&draw.epoch.to_le_bytes());
    seed[16..24].copy_from_slice(&draw.step.to_le_bytes());
    seed[24..32].copy_from_slice(&draw.layer.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Box-Muller standard normal sample.
pub fn standard_normal<R: rand::Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        if u1 > f64::MIN_POSITIVE {
            let u2: f64 = rng.gen();
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}
