//! Generator, discriminator and the layers they are built from.

pub mod blocks;
pub mod config;
pub mod discriminator;
pub mod generator;
pub mod nn;

pub use blocks::{ChannelAttention, ContextualGate, DenseAttentionBlock, DenseBlock, Downsample, Upsample};
pub use config::{Ablation, DiscriminatorConfig, GeneratorConfig};
pub use discriminator::Discriminator;
pub use generator::{Generator, SIZE_MULTIPLE};
pub use nn::{Conv2d, ConvSpec, ParamBuilder, ParamStore};
