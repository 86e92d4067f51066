//! Parameter storage, layers and the custom kernels they run on.

pub mod layers;
pub mod ops;
pub mod params;

pub use layers::{BatchNorm2d, BiGru, BlockConvTranspose, Conv2d, EncoderLayer, LayerNorm, Linear, PatchEmbed, SelfAttention};
pub use params::{Builder, Init, ParamStore};
