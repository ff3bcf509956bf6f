//! Flat `key = value` configuration for the whole detector.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::query::seeds::FpsMode;
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Early,
    Late,
    Gated,
}

impl FusionMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "early" => Some(Self::Early),
            "late" | "late_1x1" => Some(Self::Late),
            "gated" => Some(Self::Gated),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Early => "early",
            Self::Late => "late",
            Self::Gated => "gated",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "easy" | "0" => Some(Self::Easy),
            "moderate" | "mod" | "1" => Some(Self::Moderate),
            "hard" | "2" => Some(Self::Hard),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Easy => "easy",
            Self::Moderate => "moderate",
            Self::Hard => "hard",
        }
    }

    /// Minimum 2D box height (px), maximum occlusion level and maximum
    /// truncation for the bucket.
    pub fn limits(self) -> (f64, i32, f64) {
        match self {
            Self::Easy => (40.0, 0, 0.15),
            Self::Moderate => (25.0, 1, 0.30),
            Self::Hard => (25.0, 2, 0.50),
        }
    }
}

/// Every tunable of the pipeline. Keys in the text form match field names.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub seed_sample: Option<u64>,
    pub seed_voxel: Option<u64>,
    pub seed_dropout: Option<u64>,
    pub seed_augment: Option<u64>,
    pub seed_fps: Option<u64>,

    /// `x_min, y_min, z_min, x_max, y_max, z_max` in meters.
    pub point_cloud_range: [f64; 6],
    pub voxel_size: f64,
    pub backbone_channels: [usize; 4],
    pub bev_channels: usize,

    pub virtual_points: bool,
    pub painting: bool,
    pub virtual_max_range: f64,
    pub sample_bins: usize,
    pub sample_retain: f64,
    pub sample_near_threshold: f64,

    pub fusion: FusionMode,

    pub nms_min_dist: usize,
    pub seed_score_thresh: f64,
    pub num_queries: usize,
    pub fps_gamma: f64,
    pub fps_epsilon: f64,
    pub fps_tail_fraction: f64,
    pub fps_mode: FpsMode,
    pub anchor_z: f64,
    pub refine_channels: usize,

    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub k_voxel: usize,
    pub k_point: usize,
    pub bias_bins: usize,
    pub bias_range: f64,
    pub range_view_azimuth_bins: usize,
    pub range_view_inclination_bins: usize,

    pub score_thresh: f64,
    pub nms_iou: f64,

    pub augment: bool,
    pub aug_flip: bool,
    pub aug_rotation_deg: f64,
    pub aug_scale: f64,
    pub dropout_radius: f64,
    pub dropout_prob: f64,

    pub difficulty_filter: Vec<Difficulty>,
    pub min_points: BTreeMap<String, usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seed_sample: None,
            seed_voxel: None,
            seed_dropout: None,
            seed_augment: None,
            seed_fps: None,
            point_cloud_range: [0.0, -40.0, -3.0, 70.4, 40.0, 1.0],
            voxel_size: 0.05,
            backbone_channels: [16, 32, 64, 128],
            bev_channels: 128,
            virtual_points: true,
            painting: false,
            virtual_max_range: 100.0,
            sample_bins: 10,
            sample_retain: 0.2,
            sample_near_threshold: 60.0,
            fusion: FusionMode::Early,
            nms_min_dist: 2,
            seed_score_thresh: 0.1,
            num_queries: 256,
            fps_gamma: 1.0,
            fps_epsilon: 1e-6,
            fps_tail_fraction: 0.1,
            fps_mode: FpsMode::AsWritten,
            anchor_z: crate::query::DEFAULT_ANCHOR_Z,
            refine_channels: 64,
            d_model: 128,
            heads: 4,
            layers: 3,
            ffn_dim: 256,
            k_voxel: 16,
            k_point: 32,
            bias_bins: 15,
            bias_range: 4.0,
            range_view_azimuth_bins: 512,
            range_view_inclination_bins: 64,
            score_thresh: 0.3,
            nms_iou: 0.1,
            augment: false,
            aug_flip: true,
            aug_rotation_deg: 45.0,
            aug_scale: 0.1,
            dropout_radius: 40.0,
            dropout_prob: 0.8,
            difficulty_filter: Difficulty::ALL.to_vec(),
            min_points: ["Car", "Pedestrian", "Cyclist"].iter().map(|c| (c.to_string(), 5)).collect(),
        }
    }
}

fn list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    v.split(',').map(|s| s.trim().parse().ok()).collect()
}

fn boolean(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Some(true),
        "false" | "0" | "no" | "off" => Some(false),
        _ => None,
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    /// Unknown keys and malformed values are errors naming the line.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, i + 1, format!("expected `key = value`, got `{line}`")))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|reason| Error::parse(path, i + 1, reason))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value `{v}` for `{key}`"))
        }
        let bad = || format!("bad value `{v}` for `{key}`");
        match key {
            "seed" => self.seed = p(key, v)?,
            "seed_sample" => self.seed_sample = Some(p(key, v)?),
            "seed_voxel" => self.seed_voxel = Some(p(key, v)?),
            "seed_dropout" => self.seed_dropout = Some(p(key, v)?),
            "seed_augment" => self.seed_augment = Some(p(key, v)?),
            "seed_fps" => self.seed_fps = Some(p(key, v)?),
            "point_cloud_range" => {
                self.point_cloud_range = list::<f64>(v).and_then(|l| l.try_into().ok()).ok_or_else(bad)?
            }
            "voxel_size" => self.voxel_size = p(key, v)?,
            "backbone_channels" => {
                self.backbone_channels = list::<usize>(v).and_then(|l| l.try_into().ok()).ok_or_else(bad)?
            }
            "bev_channels" => self.bev_channels = p(key, v)?,
            "virtual_points" => self.virtual_points = boolean(v).ok_or_else(bad)?,
            "painting" => self.painting = boolean(v).ok_or_else(bad)?,
            "virtual_max_range" => self.virtual_max_range = p(key, v)?,
            "sample_bins" => self.sample_bins = p(key, v)?,
            "sample_retain" => self.sample_retain = p(key, v)?,
            "sample_near_threshold" => self.sample_near_threshold = p(key, v)?,
            "fusion" => self.fusion = FusionMode::parse(v).ok_or_else(bad)?,
            "nms_min_dist" => self.nms_min_dist = p(key, v)?,
            "seed_score_thresh" => self.seed_score_thresh = p(key, v)?,
            "num_queries" => self.num_queries = p(key, v)?,
            "fps_gamma" => self.fps_gamma = p(key, v)?,
            "fps_epsilon" => self.fps_epsilon = p(key, v)?,
            "fps_tail_fraction" => self.fps_tail_fraction = p(key, v)?,
            "fps_mode" => {
                self.fps_mode = match v {
                    "as_written" => FpsMode::AsWritten,
                    "prose" | "prose_consistent" => FpsMode::ProseConsistent,
                    _ => return Err(bad()),
                }
            }
            "anchor_z" => self.anchor_z = p(key, v)?,
            "refine_channels" => self.refine_channels = p(key, v)?,
            "d_model" => self.d_model = p(key, v)?,
            "heads" => self.heads = p(key, v)?,
            "layers" => self.layers = p(key, v)?,
            "ffn_dim" => self.ffn_dim = p(key, v)?,
            "k_voxel" => self.k_voxel = p(key, v)?,
            "k_point" => self.k_point = p(key, v)?,
            "bias_bins" => self.bias_bins = p(key, v)?,
            "bias_range" => self.bias_range = p(key, v)?,
            "range_view_azimuth_bins" => self.range_view_azimuth_bins = p(key, v)?,
            "range_view_inclination_bins" => self.range_view_inclination_bins = p(key, v)?,
            "score_thresh" => self.score_thresh = p(key, v)?,
            "nms_iou" => self.nms_iou = p(key, v)?,
            "augment" => self.augment = boolean(v).ok_or_else(bad)?,
            "aug_flip" => self.aug_flip = boolean(v).ok_or_else(bad)?,
            "aug_rotation_deg" => self.aug_rotation_deg = p(key, v)?,
            "aug_scale" => self.aug_scale = p(key, v)?,
            "dropout_radius" => self.dropout_radius = p(key, v)?,
            "dropout_prob" => self.dropout_prob = p(key, v)?,
            "difficulty_filter" => {
                let mut d: Vec<Difficulty> = v
                    .split(',')
                    .map(|s| Difficulty::parse(s.trim()))
                    .collect::<Option<_>>()
                    .ok_or_else(bad)?;
                d.sort();
                d.dedup();
                self.difficulty_filter = d;
            }
            "min_points" => {
                let mut m = BTreeMap::new();
                for item in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    let (class, n) = item.split_once(':').ok_or_else(bad)?;
                    m.insert(class.trim().to_string(), p::<usize>(key, n.trim())?);
                }
                self.min_points = m;
            }
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.point_cloud_range;
        if !(r[0] < r[3] && r[1] < r[4] && r[2] < r[5]) || r.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point_cloud_range", "min must be below max on every axis"));
        }
        let positive = [
            ("voxel_size", self.voxel_size),
            ("virtual_max_range", self.virtual_max_range),
            ("bias_range", self.bias_range),
            ("sample_near_threshold", self.sample_near_threshold),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("must be positive, got {v}")));
            }
        }
        let counts = [
            ("bev_channels", self.bev_channels),
            ("sample_bins", self.sample_bins),
            ("nms_min_dist", self.nms_min_dist),
            ("num_queries", self.num_queries),
            ("refine_channels", self.refine_channels),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("k_voxel", self.k_voxel),
            ("k_point", self.k_point),
            ("bias_bins", self.bias_bins),
            ("range_view_azimuth_bins", self.range_view_azimuth_bins),
            ("range_view_inclination_bins", self.range_view_inclination_bins),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(name, "must be at least 1"));
            }
        }
        if self.backbone_channels.contains(&0) {
            return Err(Error::invalid("backbone_channels", "must be at least 1"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid("heads", format!("{} does not divide d_model {}", self.heads, self.d_model)));
        }
        let unit = [
            ("sample_retain", self.sample_retain),
            ("seed_score_thresh", self.seed_score_thresh),
            ("fps_tail_fraction", self.fps_tail_fraction),
            ("score_thresh", self.score_thresh),
            ("nms_iou", self.nms_iou),
            ("dropout_prob", self.dropout_prob),
            ("aug_scale", self.aug_scale),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(name, format!("must lie in [0, 1], got {v}")));
            }
        }
        if self.sample_retain == 0.0 {
            return Err(Error::invalid("sample_retain", "must be positive"));
        }
        if !(self.fps_gamma >= 0.0 && self.fps_epsilon > 0.0) {
            return Err(Error::invalid("fps_gamma", "γ must be ≥ 0 and ε > 0"));
        }
        if !(0.0..=180.0).contains(&self.aug_rotation_deg) {
            return Err(Error::invalid("aug_rotation_deg", "must lie in [0, 180]"));
        }
        if !(self.dropout_radius >= 0.0) {
            return Err(Error::invalid("dropout_radius", "must be nonnegative"));
        }
        if !self.anchor_z.is_finite() {
            return Err(Error::invalid("anchor_z", "must be finite"));
        }
        Ok(())
    }

    /// Stream seed: the explicit override or one derived from `seed`.
    pub fn stream_seed(&self, stream: Stream) -> u64 {
        let (o, k) = match stream {
            Stream::Sample => (self.seed_sample, 1),
            Stream::Voxel => (self.seed_voxel, 2),
            Stream::Dropout => (self.seed_dropout, 3),
            Stream::Augment => (self.seed_augment, 4),
            Stream::Fps => (self.seed_fps, 5),
        };
        o.unwrap_or_else(|| derive_seed(self.seed, k))
    }

    /// Text form accepted by [`Self::parse`].
    pub fn to_text(&self) -> String {
        let join = |v: &[String]| v.join(",");
        let mut lines = vec![
            format!("seed = {}", self.seed),
            format!("point_cloud_range = {}", join(&self.point_cloud_range.map(|v| v.to_string()))),
            format!("voxel_size = {}", self.voxel_size),
            format!("backbone_channels = {}", join(&self.backbone_channels.map(|v| v.to_string()))),
            format!("bev_channels = {}", self.bev_channels),
            format!("virtual_points = {}", self.virtual_points),
            format!("painting = {}", self.painting),
            format!("virtual_max_range = {}", self.virtual_max_range),
            format!("sample_bins = {}", self.sample_bins),
            format!("sample_retain = {}", self.sample_retain),
            format!("sample_near_threshold = {}", self.sample_near_threshold),
            format!("fusion = {}", self.fusion.name()),
            format!("nms_min_dist = {}", self.nms_min_dist),
            format!("seed_score_thresh = {}", self.seed_score_thresh),
            format!("num_queries = {}", self.num_queries),
            format!("fps_gamma = {}", self.fps_gamma),
            format!("fps_epsilon = {}", self.fps_epsilon),
            format!("fps_tail_fraction = {}", self.fps_tail_fraction),
            format!(
                "fps_mode = {}",
                match self.fps_mode {
                    FpsMode::AsWritten => "as_written",
                    FpsMode::ProseConsistent => "prose",
                }
            ),
            format!("anchor_z = {}", self.anchor_z),
            format!("refine_channels = {}", self.refine_channels),
            format!("d_model = {}", self.d_model),
            format!("heads = {}", self.heads),
            format!("layers = {}", self.layers),
            format!("ffn_dim = {}", self.ffn_dim),
            format!("k_voxel = {}", self.k_voxel),
            format!("k_point = {}", self.k_point),
            format!("bias_bins = {}", self.bias_bins),
            format!("bias_range = {}", self.bias_range),
            format!("range_view_azimuth_bins = {}", self.range_view_azimuth_bins),
            format!("range_view_inclination_bins = {}", self.range_view_inclination_bins),
            format!("score_thresh = {}", self.score_thresh),
            format!("nms_iou = {}", self.nms_iou),
            format!("augment = {}", self.augment),
            format!("aug_flip = {}", self.aug_flip),
            format!("aug_rotation_deg = {}", self.aug_rotation_deg),
            format!("aug_scale = {}", self.aug_scale),
            format!("dropout_radius = {}", self.dropout_radius),
            format!("dropout_prob = {}", self.dropout_prob),
            format!(
                "difficulty_filter = {}",
                join(&self.difficulty_filter.iter().map(|d| d.name().to_string()).collect::<Vec<_>>())
            ),
            format!(
                "min_points = {}",
                join(&self.min_points.iter().map(|(k, v)| format!("{k}:{v}")).collect::<Vec<_>>())
            ),
        ];
        let seeds = [
            ("seed_sample", self.seed_sample),
            ("seed_voxel", self.seed_voxel),
            ("seed_dropout", self.seed_dropout),
            ("seed_augment", self.seed_augment),
            ("seed_fps", self.seed_fps),
        ];
        for (k, v) in seeds {
            if let Some(v) = v {
                lines.push(format!("{k} = {v}"));
            }
        }
        lines.join("\n") + "\n"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Sample,
    Voxel,
    Dropout,
    Augment,
    Fps,
}
