//! ViT-style encoder used for both teacher and student.

pub mod config;
pub mod encoder;
pub mod patch;
pub mod rpb;

pub use config::{EncoderConfig, PosMode};
pub use encoder::{
    param_shapes, patch_embed, AttentionRecord, Encoder, EncoderOutput, ForwardOptions, GraphOutput,
};
pub use patch::{patchify, unpatchify};
pub use rpb::{build_rel_pos_index, RelPosBias};
