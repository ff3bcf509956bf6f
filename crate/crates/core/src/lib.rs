//! Camera/LiDAR fusion 3D detector built from explicit, checkable stages:
//! virtual points from completed depth, early or BEV-level fusion, a sparse
//! voxel backbone, score-modulated query seeding and a cross-attention head.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`). The
//! aliases at the bottom fix the scalar for common uses.

pub mod attention;
pub mod backbone;
pub mod calib;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod head;
pub mod linalg;
pub mod nn;
pub mod pipeline;
pub mod query;
pub mod rng;
pub mod scalar;
pub mod virtual_points;
pub mod weights;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Box7f = head::Box7<f32>;
pub type Box7d = head::Box7<f64>;
pub type Detectionf = head::Detection<f32>;
pub type Detectiond = head::Detection<f64>;
pub type CalibrationSetf = calib::CalibrationSet<f32>;
pub type CalibrationSetd = calib::CalibrationSet<f64>;
pub type Point8Df = fusion::Point8D<f32>;
pub type Point8Dd = fusion::Point8D<f64>;
pub type FusedCloudf = fusion::FusedCloud<f32>;
pub type FusedCloudd = fusion::FusedCloud<f64>;
pub type BEVHeatmapf = backbone::BEVHeatmap<f32>;
pub type BEVHeatmapd = backbone::BEVHeatmap<f64>;
pub type DetectorWeightsf = pipeline::DetectorWeights<f32>;
pub type DetectorWeightsd = pipeline::DetectorWeights<f64>;
pub type FrameBundlef = pipeline::FrameBundle<f32>;
pub type FrameBundled = pipeline::FrameBundle<f64>;
