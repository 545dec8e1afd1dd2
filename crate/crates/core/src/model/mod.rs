//! The masked-autoencoder network: ViT encoder over visible patches, a
//! transformer decoder that fills masked patches back in, and a pooled
//! classification head.

mod config;
pub mod forward;
pub mod loss;
mod params;

pub use config::ModelConfig;
pub use forward::{
    bind, classify, classify_latent, decode, decode_latent, encode, encode_tokens, forward_full, Bound, OUTPUT_SCALE,
    PIXEL_CENTER, PIXEL_SCALE,
};
pub use loss::{
    classification_loss, masked_objective, objective_value, reconstruction_loss, reconstruction_loss_node, total_loss,
    total_loss_node, ClassTarget, LossWeights, ObjectiveNodes,
};
pub use params::{layout, sincos_position_table, BlockIdx, Layout, LinearIdx, ModelParams, NormIdx, ParamKind, ParamSpec, Part};
