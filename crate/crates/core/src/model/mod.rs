//! Llama-style decoder: grouped-query attention with rotary embeddings,
//! pre-norm RMSNorm, SwiGLU feed-forward and untied embeddings.

pub mod checkpoint;
mod config;
mod forward;
mod masks;
mod weights;

pub use config::{count_params, ModelConfig};
pub use forward::{
    bind, build, build_loss, check_tokens, forward, forward_with, loss_next_token, ForwardOptions,
    ForwardOutput, LanguageModel, MaskedModel, Model, ParamVars,
};
pub use masks::{Masks, WidthLayout};
pub use weights::{init_model, LayerWeights, TransformerWeights, INIT_STD};
