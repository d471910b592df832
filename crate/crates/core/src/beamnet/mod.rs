//! The learned beam predictor: CNN visual branch, Transformer structured
//! branch, cross-attention fusion, and the beam classifier.

mod config;
mod model;
mod params;

pub use config::{ModelConfig, StructTokenMode};
pub use model::{
    apply_bn_updates, classify, cnn_forward, collect_param_grads, cross_attention_fuse, forward,
    predict_topk, transformer_forward, Forward, Mode, TapeParams, Trace, BN_MOMENTUM, NORM_EPS,
};
pub use params::{AttentionParams, ConvBlockParams, EncoderLayerParams, ModelParams};
