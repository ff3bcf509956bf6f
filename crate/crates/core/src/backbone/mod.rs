//! Voxelization, sparse convolutions and the BEV heatmap.

pub mod bev;
pub mod net;
pub mod sparse;
pub mod voxel;

pub use bev::{apply_score_head, bev_collapse, gated_fuse, late_fuse_1x1, BEVHeatmap};
pub use net::{
    backbone_backward, backbone_features, backbone_forward, BackboneCache, BackboneConfig, BackboneOutput,
    BackboneWeights, BevGeometry,
};
pub use sparse::{strided_conv, submanifold_conv, ConvParams, SparseTensor3D};
pub use voxel::{voxelize, Voxel, VoxelCoord, VoxelGrid};
