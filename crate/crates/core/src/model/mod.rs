//! Backbone network and its checkpoint format.

mod backbone;
pub mod checkpoint;
mod config;

pub use backbone::{
    argmax, conv_bias, conv_weight, head_weight, param_manifest, Backbone, Bound, Provenance,
    CLASSIFIER_BIAS, CLASSIFIER_WEIGHT, POS_EMBEDDING,
};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{parse_blocks, BackboneConfig, ConvBlock, DEFAULT_CONTEXT_WINDOW, DEFAULT_HORIZONS};
