//! End-to-end detection: configuration, KITTI-style I/O, synthetic scenes,
//! evaluation and the staged forward pass.

pub mod augment;
pub mod config;
pub mod constructed;
pub mod detect;
pub mod eval;
pub mod export;
pub mod iou;
pub mod kitti;
pub mod synth;

pub use config::{Difficulty, FusionMode, PipelineConfig, Stream};
pub use detect::{load_weights, run_detect, DetectOutput, DetectorWeights};
pub use eval::{evaluate, load_eval_dirs, EvalResult, FrameResult, Metric};
pub use export::{export_detections, export_heatmap, heatmap_pgm};
pub use kitti::{load_frame, FrameBundle, FramePaths, KittiObject};
pub use synth::{synth_scene, write_frame, SceneObject, SceneSpec};
