//! Hand-set weights and a matching scene for end-to-end smoke runs.
//!
//! The backbone scores each non-ground voxel by `max(0, R - |x - x0| - |y - y0|)`
//! and sums that over every stride-8 column, so the heatmap peaks over the
//! box at `(x0, y0)`. Everything after the heatmap passes the seed feature
//! through to a Car box of default size at the seed cell.

use super::config::PipelineConfig;
use super::detect::{attention_config, backbone_config, DetectorWeights};
use super::synth::{SceneObject, SceneSpec};
use crate::attention::TransformerWeights;
use crate::backbone::sparse::{tap_index, CENTER_TAP};
use crate::backbone::{BackboneWeights, ConvParams};
use crate::head::{Box7, HeadWeights};
use crate::nn::Linear;
use crate::query::QueryWeights;
use crate::Real;

/// L1 radius around the box center that contributes to the heatmap.
pub const RADIUS: f64 = 1.5;
/// Points within this height of the ground are ignored.
pub const GROUND_MARGIN: f64 = 0.25;

fn strided_children() -> impl Iterator<Item = usize> {
    (0..8i32).map(|b| tap_index([b >> 2 & 1, b >> 1 & 1, b & 1]))
}

/// Backbone whose channel 0 carries the clipped L1 proximity to `center`.
pub fn proximity_backbone<T: Real>(cfg: &PipelineConfig, center: [f64; 2], ground_z: f64) -> BackboneWeights<T> {
    let bb = backbone_config(cfg);
    assert!(bb.channels[0] >= 5, "constructed weights need at least 5 conv1 channels");
    let l = T::lit;
    let mut w = BackboneWeights::<T>::zeros(&bb);
    // conv1: relu(±(x - x0)), relu(±(y - y0)), relu(ground + margin - z).
    for (o, (feat, sign, off)) in [
        (0, 1.0, -center[0]),
        (0, -1.0, center[0]),
        (1, 1.0, -center[1]),
        (1, -1.0, center[1]),
    ]
    .into_iter()
    .enumerate()
    {
        *w.conv1.w_mut(CENTER_TAP, feat, o) = l(sign);
        w.conv1.bias[o] = l(off);
    }
    *w.conv1.w_mut(CENTER_TAP, 2, 4) = l(-1.0);
    w.conv1.bias[4] = l(ground_z + GROUND_MARGIN);

    for o in 0..4 {
        *w.conv2.w_mut(CENTER_TAP, o, 0) = l(-1.0);
    }
    *w.conv2.w_mut(CENTER_TAP, 4, 0) = l(-100.0);
    w.conv2.bias[0] = l(RADIUS);

    for conv in [&mut w.conv3, &mut w.conv4] {
        *conv.w_mut(CENTER_TAP, 0, 0) = T::one();
    }
    for down in [&mut w.down2, &mut w.down3, &mut w.down4] {
        for t in strided_children() {
            *down.w_mut(t, 0, 0) = T::one();
        }
    }
    *w.bev_proj.w_mut(0, 0, 0) = T::one();
    *w.score_head.w_mut(0, 0, 0) = T::one();
    w.score_head.bias[0] = l(-3.0);
    w
}

/// Full detector weights for a box centered at `center` on a ground plane at
/// `ground_z`. Late fusion averages the two branches and the gate sits at 1/2.
pub fn constructed_weights<T: Real>(cfg: &PipelineConfig, center: [f64; 2], ground_z: f64) -> DetectorWeights<T> {
    let c = cfg.bev_channels;
    let d = cfg.d_model;
    let backbone = proximity_backbone(cfg, center, ground_z);
    let mut late_fuse = ConvParams::zeros(1, 2 * c, c);
    for k in 0..c {
        *late_fuse.w_mut(0, k, k) = T::lit(0.5);
        *late_fuse.w_mut(0, c + k, k) = T::lit(0.5);
    }
    let mut query = QueryWeights::zeros(c, cfg.refine_channels, d);
    query.reduce = Linear::identity(2 * c, d);

    let mut head = HeadWeights::zeros(d);
    head.objectness.weight[0] = T::lit(50.0);
    head.objectness.bias[0] = T::lit(-5.0);
    for (k, v) in [3.9f64, 1.6, 1.56].iter().enumerate() {
        head.box_reg.bias[3 + k] = T::lit(v.ln());
    }
    head.box_reg.bias[7] = T::one();

    DetectorWeights {
        backbone_virtual: backbone.clone(),
        backbone,
        late_fuse,
        gate: ConvParams::zeros(1, 2 * c, c),
        query,
        voxel_proj: Linear::zeros(cfg.backbone_channels[3], d),
        point_embed: Linear::zeros(8, d),
        transformer: TransformerWeights::pass_through(&attention_config::<T>(cfg)),
        head,
    }
}

/// A compact detector: 25.6 m × 25.6 m range at 0.1 m voxels, narrow layers.
pub fn smoke_config() -> PipelineConfig {
    PipelineConfig {
        point_cloud_range: [0.0, -12.8, -3.0, 25.6, 12.8, 1.0],
        voxel_size: 0.1,
        backbone_channels: [6, 4, 4, 4],
        bev_channels: 4,
        refine_channels: 4,
        num_queries: 16,
        d_model: 8,
        heads: 2,
        layers: 1,
        ffn_dim: 16,
        k_voxel: 8,
        k_point: 8,
        virtual_max_range: 25.0,
        sample_near_threshold: 20.0,
        range_view_azimuth_bins: 128,
        range_view_inclination_bins: 32,
        ..PipelineConfig::default()
    }
}

/// One Car standing on a lowered ground plane so the LiDAR sees its roof.
pub fn smoke_scene(center: [f64; 2]) -> SceneSpec {
    let ground_z = -2.6;
    let h = 1.56;
    SceneSpec {
        seed: 7,
        objects: vec![SceneObject {
            class: "Car".into(),
            bbox: Box7::new([center[0], center[1], ground_z + h / 2.0], [3.9, 1.6, h], 0.0)
                .expect("valid smoke box"),
        }],
        ground_z,
        lidar_beams: 64,
        lidar_azimuth_steps: 1024,
        lidar_fov_up: 2.0,
        lidar_fov_down: -24.8,
        lidar_azimuth_fov: 120.0,
        max_range: 40.0,
        image_width: 320,
        image_height: 96,
        focal: 180.0,
        ..SceneSpec::default()
    }
}
