//! Miniature point transformer: per-point embedding, learned positional
//! encoding, pre-norm blocks of patch-local attention and FFN, and a linear
//! segmentation head. PEFT branches hook in at fixed insertion points.

mod config;
mod model;

pub use config::{even_stages, BackboneConfig};
pub use model::{
    embed, ffn, forward, layer_norm, linear, local_attention, pos_encode, BlockActivations, ForwardOutput, Model,
    PreparedCloud, LN_EPS,
};
