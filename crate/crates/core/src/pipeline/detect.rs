//! Full forward pass from a frame to scored boxes.

use super::config::{FusionMode, PipelineConfig, Stream};
use super::iou::bev_iou;
use super::kitti::FrameBundle;
use crate::attention::{
    build_range_index, gather_point_tokens, gather_voxel_tokens, transformer_forward, AttentionConfig, TokenBank,
    TransformerWeights, VoxelFrame,
};
use crate::backbone::{
    apply_score_head, backbone_features, gated_fuse, late_fuse_1x1, voxelize, BEVHeatmap, BackboneConfig,
    BackboneWeights, BevGeometry, ConvParams, SparseTensor3D,
};
use crate::error::{Error, Result};
use crate::fusion::{early_fuse, encode_lidar, near_field_dropout, paint_points, FusedCloud, Point8D};
use crate::head::{predict, Detection, HeadWeights};
use crate::nn::Linear;
use crate::query::seeds::{heatmap_nms, score_modulated_fps, FpsConfig};
use crate::query::{init_queries, QueryWeights};
use crate::rng::derive_seed;
use crate::virtual_points::{generate_virtual_points, range_aware_sample, RangeSampleConfig};
use crate::weights::{join, ParamSet};
use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorWeights<T> {
    pub backbone: BackboneWeights<T>,
    /// Second backbone for the virtual stream in late and gated fusion.
    pub backbone_virtual: BackboneWeights<T>,
    pub late_fuse: ConvParams<T>,
    pub gate: ConvParams<T>,
    pub query: QueryWeights<T>,
    pub voxel_proj: Linear<T>,
    pub point_embed: Linear<T>,
    pub transformer: TransformerWeights<T>,
    pub head: HeadWeights<T>,
}

pub fn backbone_config(cfg: &PipelineConfig) -> BackboneConfig {
    BackboneConfig {
        channels: cfg.backbone_channels,
        bev_channels: cfg.bev_channels,
    }
}

pub fn attention_config<T: Real>(cfg: &PipelineConfig) -> AttentionConfig<T> {
    AttentionConfig {
        heads: cfg.heads,
        d_model: cfg.d_model,
        layers: cfg.layers,
        ffn_dim: cfg.ffn_dim,
        bias_bins: cfg.bias_bins,
        bias_range: T::lit(cfg.bias_range),
        k_voxel: cfg.k_voxel,
        k_point: cfg.k_point,
    }
}

impl<T: Real> DetectorWeights<T> {
    /// Seeded random initialization for the architecture in `cfg`.
    pub fn init(cfg: &PipelineConfig, seed: u64) -> Self {
        let bb = backbone_config(cfg);
        let c = cfg.bev_channels;
        let d = cfg.d_model;
        let s = |k| derive_seed(seed, k);
        Self {
            backbone: BackboneWeights::init(&bb, s(1)),
            backbone_virtual: BackboneWeights::init(&bb, s(2)),
            late_fuse: ConvParams::init_uniform(1, 2 * c, c, s(3)),
            gate: ConvParams::init_uniform(1, 2 * c, c, s(4)),
            query: QueryWeights::init(c, cfg.refine_channels, d, s(5)),
            voxel_proj: Linear::init(cfg.backbone_channels[3], d, s(6)),
            point_embed: Linear::init(8, d, s(7)),
            transformer: TransformerWeights::init(&attention_config(cfg), s(8)),
            head: HeadWeights::init(d, s(9)),
        }
    }
}

impl<T: Real> ParamSet<T> for DetectorWeights<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.backbone_virtual.visit(&join(prefix, "backbone_virtual"), f);
        self.late_fuse.visit(&join(prefix, "late_fuse"), f);
        self.gate.visit(&join(prefix, "gate"), f);
        self.query.visit(&join(prefix, "query"), f);
        self.voxel_proj.visit(&join(prefix, "voxel_proj"), f);
        self.point_embed.visit(&join(prefix, "point_embed"), f);
        self.transformer.visit(&join(prefix, "transformer"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.backbone_virtual.visit_mut(&join(prefix, "backbone_virtual"), f);
        self.late_fuse.visit_mut(&join(prefix, "late_fuse"), f);
        self.gate.visit_mut(&join(prefix, "gate"), f);
        self.query.visit_mut(&join(prefix, "query"), f);
        self.voxel_proj.visit_mut(&join(prefix, "voxel_proj"), f);
        self.point_embed.visit_mut(&join(prefix, "point_embed"), f);
        self.transformer.visit_mut(&join(prefix, "transformer"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Loads a weights file whose tensors must match the architecture of `cfg`
/// exactly.
pub fn load_weights<T: Real>(path: &std::path::Path, cfg: &PipelineConfig) -> Result<DetectorWeights<T>> {
    let store = crate::weights::TensorStore::load(path)?;
    let mut w = DetectorWeights::init(cfg, 0);
    store.load_into(&mut w)?;
    Ok(w)
}

#[derive(Debug, Clone)]
pub struct DetectOutput<T> {
    /// Final boxes in the LiDAR frame, by descending score.
    pub detections: Vec<Detection<T>>,
    pub heat: BEVHeatmap<T>,
    pub n_real: usize,
    pub n_virtual: usize,
    pub n_seeds: usize,
}

fn in_range<T: Real>(p: &Point8D<T>, r: &[T; 6]) -> bool {
    p.x >= r[0] && p.x < r[3] && p.y >= r[1] && p.y < r[4] && p.z >= r[2] && p.z < r[5]
}

fn heat_for<T: Real>(
    cloud: &FusedCloud<T>,
    w: &BackboneWeights<T>,
    cfg: &PipelineConfig,
    geom: &BevGeometry<T>,
    origin: [T; 3],
) -> Result<(BEVHeatmap<T>, SparseTensor3D<T>)> {
    let grid = voxelize(cloud, T::lit(cfg.voxel_size), origin, cfg.stream_seed(Stream::Voxel))
        .map_err(|e| e.in_stage("voxelize"))?;
    let (out, _) = backbone_features(&grid, w, geom).map_err(|e| e.in_stage("backbone"))?;
    Ok((out.heat, out.x_conv4))
}

/// Greedy BEV NMS over score-sorted detections.
pub fn bev_nms<T: Real>(mut dets: Vec<Detection<T>>, iou: T) -> Vec<Detection<T>> {
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    let mut keep: Vec<Detection<T>> = Vec::new();
    for d in dets {
        if keep.iter().all(|k| bev_iou(&k.bbox, &d.bbox) <= iou) {
            keep.push(d);
        }
    }
    keep
}

/// Fused point list (real then virtual) inside the configured range.
pub fn build_points<T: Real>(frame: &FrameBundle<T>, cfg: &PipelineConfig) -> Result<(Vec<Point8D<T>>, Vec<Point8D<T>>)> {
    let range = cfg.point_cloud_range.map(T::lit);
    let mut real = encode_lidar(&frame.cloud).map_err(|e| e.in_stage("fusion"))?;
    if cfg.painting {
        real = paint_points(&real, &frame.image, &frame.calib);
    }
    real.retain(|p| in_range(p, &range));
    let mut virt = Vec::new();
    if cfg.virtual_points {
        let all = generate_virtual_points(
            &frame.dense_depth,
            &frame.image,
            &frame.calib,
            T::lit(cfg.virtual_max_range),
        )
        .map_err(|e| e.in_stage("virtual_points"))?;
        let sample = RangeSampleConfig {
            n_bins: cfg.sample_bins,
            retain_fraction: T::lit(cfg.sample_retain),
            near_threshold: T::lit(cfg.sample_near_threshold.min(cfg.virtual_max_range)),
            max_range: T::lit(cfg.virtual_max_range),
            seed: cfg.stream_seed(Stream::Sample),
        };
        virt = range_aware_sample(&all, &sample).map_err(|e| e.in_stage("virtual_points"))?;
        virt.retain(|p| in_range(p, &range));
    }
    if cfg.augment && cfg.dropout_prob > 0.0 {
        let r = T::lit(cfg.dropout_radius);
        let keep_real = near_field_dropout(FusedCloud::from_points(real), r, cfg.dropout_prob, cfg.stream_seed(Stream::Dropout))
            .map_err(|e| e.in_stage("fusion"))?;
        let keep_virt = near_field_dropout(
            FusedCloud::from_points(virt),
            r,
            cfg.dropout_prob,
            derive_seed(cfg.stream_seed(Stream::Dropout), 1),
        )
        .map_err(|e| e.in_stage("fusion"))?;
        real = keep_real.into_points();
        virt = keep_virt.into_points();
    }
    Ok((real, virt))
}

/// Fuses, voxelizes and runs the backbone in the chosen mode. Returns the
/// scored heatmap and the stride-8 features used for voxel tokens.
pub fn run_bev<T: Real>(
    real: &[Point8D<T>],
    virt: &[Point8D<T>],
    cfg: &PipelineConfig,
    mode: FusionMode,
    weights: &DetectorWeights<T>,
) -> Result<(BEVHeatmap<T>, SparseTensor3D<T>)> {
    let r = cfg.point_cloud_range.map(T::lit);
    let origin = [r[0], r[1], r[2]];
    let geom = BevGeometry::from_range([r[0], r[1]], [r[3], r[4]], T::lit(cfg.voxel_size))?;
    let (mut heat, x4) = match mode {
        FusionMode::Early => {
            let fused = early_fuse(real, virt).map_err(|e| e.in_stage("fusion"))?;
            heat_for(&fused, &weights.backbone, cfg, &geom, origin)?
        }
        FusionMode::Late | FusionMode::Gated => {
            let (hr, x4) = heat_for(&FusedCloud::from_points(real.to_vec()), &weights.backbone, cfg, &geom, origin)?;
            let (hv, _) = heat_for(
                &FusedCloud::from_points(virt.to_vec()),
                &weights.backbone_virtual,
                cfg,
                &geom,
                origin,
            )?;
            let fused = if mode == FusionMode::Late {
                late_fuse_1x1(&hr, &hv, &weights.late_fuse)
            } else {
                gated_fuse(&hr, &hv, &weights.gate)
            };
            (fused.map_err(|e| e.in_stage("bev_fusion"))?, x4)
        }
    };
    apply_score_head(&mut heat, &weights.backbone.score_head).map_err(|e| e.in_stage("backbone"))?;
    Ok((heat, x4))
}

pub fn run_detect<T: Real>(
    frame: &FrameBundle<T>,
    cfg: &PipelineConfig,
    mode: FusionMode,
    weights: &DetectorWeights<T>,
) -> Result<DetectOutput<T>> {
    cfg.validate()?;
    let (real, virt) = build_points(frame, cfg)?;
    let (heat, x4) = run_bev(&real, &virt, cfg, mode, weights)?;
    let mut out = DetectOutput {
        detections: Vec::new(),
        heat,
        n_real: real.len(),
        n_virtual: virt.len(),
        n_seeds: 0,
    };
    if real.is_empty() && virt.is_empty() {
        return Ok(out);
    }
    let heat = &out.heat;

    let cands = heatmap_nms(heat, cfg.nms_min_dist, T::lit(cfg.seed_score_thresh)).map_err(|e| e.in_stage("query_init"))?;
    if cands.is_empty() {
        return Ok(out);
    }
    let fps = FpsConfig {
        k: cfg.num_queries,
        gamma: T::lit(cfg.fps_gamma),
        epsilon: T::lit(cfg.fps_epsilon),
        tail_fraction: T::lit(cfg.fps_tail_fraction),
        mode: cfg.fps_mode,
        seed: cfg.stream_seed(Stream::Fps),
    };
    let seeds = score_modulated_fps(&cands, &fps).map_err(|e| e.in_stage("query_init"))?;
    out.n_seeds = seeds.len();
    let protos = init_queries(heat, &seeds, T::lit(cfg.anchor_z), &weights.query).map_err(|e| e.in_stage("query_init"))?;

    let points: Vec<Point8D<T>> = real.iter().chain(&virt).copied().collect();
    let index = build_range_index(&points, cfg.range_view_azimuth_bins, cfg.range_view_inclination_bins)
        .map_err(|e| e.in_stage("tokens"))?;
    let frame3 = VoxelFrame {
        voxel_size: T::lit(cfg.voxel_size),
        origin: {
            let r = cfg.point_cloud_range.map(T::lit);
            [r[0], r[1], r[2]]
        },
    };
    let mut banks: Vec<TokenBank<T>> = Vec::with_capacity(protos.len());
    for p in &protos {
        let bank = (|| -> Result<TokenBank<T>> {
            let voxels = gather_voxel_tokens(&p.lifted, &x4, &frame3, cfg.k_voxel)?;
            let voxels = if x4.is_empty() {
                let mut b = TokenBank::empty(cfg.d_model);
                for _ in 0..cfg.k_voxel {
                    b.push([T::zero(); 3], &vec![T::zero(); cfg.d_model], false);
                }
                b
            } else {
                voxels.project(&weights.voxel_proj)?
            };
            let pts = gather_point_tokens(&p.lifted, &index, &points, cfg.k_point, &weights.point_embed)?;
            voxels.concat(&pts)
        })()
        .map_err(|e| e.in_stage("tokens"))?;
        banks.push(bank);
    }

    let acfg = attention_config::<T>(cfg);
    let queries: Vec<Vec<T>> = protos.iter().map(|p| p.query.clone()).collect();
    let positions: Vec<[T; 3]> = protos.iter().map(|p| p.lifted).collect();
    let feats = transformer_forward(&queries, &positions, &banks, &weights.transformer, &acfg)
        .map_err(|e| e.in_stage("transformer"))?;

    let mut dets = Vec::new();
    for (f, p) in feats.iter().zip(&protos) {
        let d = predict(f, &p.lifted, &weights.head).map_err(|e| e.in_stage("head"))?;
        if d.score >= T::lit(cfg.score_thresh) {
            dets.push(d);
        }
    }
    out.detections = bev_nms(dets, T::lit(cfg.nms_iou));
    Ok(out)
}

/// Rejects a weights set whose shapes disagree with `cfg`.
pub fn check_compatible<T: Real>(w: &DetectorWeights<T>, cfg: &PipelineConfig) -> Result<()> {
    let expect = DetectorWeights::<T>::init(cfg, 0);
    let mut shapes = Vec::new();
    expect.visit("", &mut |n, s, _| shapes.push((n.to_string(), s.to_vec())));
    let mut got = Vec::new();
    w.visit("", &mut |n, s, _| got.push((n.to_string(), s.to_vec())));
    if shapes != got {
        let first = shapes
            .iter()
            .zip(&got)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("{} {:?} vs {} {:?}", a.0, a.1, b.0, b.1))
            .unwrap_or_else(|| format!("{} tensors vs {}", shapes.len(), got.len()));
        return Err(Error::invalid("weights", format!("incompatible with config: {first}")));
    }
    Ok(())
}
