//! Convolutional network engine with neuron, channel, path and layer level
//! dropout, pre-activation building blocks and numerical diagnostics.

pub mod blocks;
pub mod data;
pub mod diagnostics;
pub mod drop;
pub mod error;
pub mod layers;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use blocks::{Block, BlockConfig, BlockKind, Placement};
pub use drop::{DropLevel, DropMask, DropSpec, Scaling};
pub use error::{Error, Result};
pub use layers::Parameterized;
pub use network::{Network, NetworkSpec, NetworkState, StageSpec, StemSpec};
pub use rng::DrawId;
pub use tensor::{Real, Shape, Tensor};

use serde::{Deserialize, Serialize};

/// Train mode samples masks and uses batch statistics; eval mode is
/// deterministic and never mutates state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}
