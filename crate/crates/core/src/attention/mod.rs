//! Context assembly and the cross-attention head.

pub mod attn;
pub mod block;
pub mod tokens;

pub use attn::{bias_row, cross_attention, relative_bias, AttentionConfig, AttnParams};
pub use block::{transformer_forward, BlockWeights, TransformerWeights};
pub use tokens::{
    build_range_index, gather_point_tokens, gather_voxel_tokens, RangeViewIndex, Token, TokenBank, VoxelFrame,
};
