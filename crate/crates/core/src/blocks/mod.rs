//! The video diffusion backbone: tokens, conditioning, sublayers and variants.

mod config;
mod embed;
mod model;
mod tokens;


pub use config::{Conditioning, GatePlacement, ModelConfig, SublayerKind};
pub use embed::{patchify, positional_embedding, timestep_features, unpatchify};
pub use model::{m_adan, mamba_mixer, FinalLayer, Matten, MambaParams, MlpParams, ModelOutput, NormParams, Sublayer, SublayerBody};
pub use tokens::{prepend_cond, relayout, spatial_first_index, spatial_first_order, split_cond, Axes, Layout, TokenSequence};
