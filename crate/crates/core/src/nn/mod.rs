//! Minimal layer toolkit on top of candle tensors with seeded initialization.

pub mod conv;
mod fused;
mod layers;
pub mod pool;
mod params;

pub use layers::{l2_normalize, BatchNorm2d, Conv2d, ConvBlock, Linear, Mode, UpConv};
pub use params::{Param, ParamBuilder, ParamKind, ParamStore};
