//! Parameter storage, basic layers and layer accounting.

pub mod layers;
pub mod params;
pub mod stats;

pub use layers::{
    BatchNorm, Conv2d, ConvSpec, DepthwiseConv3x3, InstanceNorm, LayerNorm, Linear, Norm2d,
};
pub use params::{Param, ParamKind, ParamStore};
pub use stats::{count_macs, LayerStats};
