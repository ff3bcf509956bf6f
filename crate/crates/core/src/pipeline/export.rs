//! Heatmap images and detection files.

use std::path::Path;

use super::kitti::{write_labels, KittiObject};
use crate::backbone::BEVHeatmap;
use crate::calib::{project_lidar_to_image, CalibrationSet};
use crate::error::{Error, Result};
use crate::head::{box_corners, Detection};
use crate::Real;

/// Binary PGM (`P5`, maxval 255) of the score map in storage order, each
/// byte `round(score · 255)` with halves rounded up.
pub fn heatmap_pgm<T: Real>(heat: &BEVHeatmap<T>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", heat.width, heat.height).into_bytes();
    out.extend(heat.score.iter().map(|s| {
        let v = (s.to_f64_lossy().clamp(0.0, 1.0) * 255.0 + 0.5).floor();
        v as u8
    }));
    out
}

pub fn export_heatmap<T: Real>(heat: &BEVHeatmap<T>, path: &Path) -> Result<()> {
    std::fs::write(path, heatmap_pgm(heat)).map_err(|e| Error::io(path, e))
}

/// KITTI label fields for a LiDAR-frame detection: camera box, projected
/// 2D box clipped to the image, alpha and score. Boxes wholly behind the
/// camera get an empty 2D box.
pub fn detection_to_kitti<T: Real>(det: &Detection<T>, calib: &CalibrationSet<T>, image: (usize, usize)) -> KittiObject<T> {
    let mut o = KittiObject::from_lidar_box(det.class_name(), &det.bbox, calib, Some(det.score));
    let (w, h) = (T::from_usize_lossy(image.0), T::from_usize_lossy(image.1));
    let mut lo = [T::infinity(); 2];
    let mut hi = [T::neg_infinity(); 2];
    for c in box_corners(&det.bbox) {
        if let Ok(px) = project_lidar_to_image(&c, calib, None) {
            lo = [lo[0].min(px.u), lo[1].min(px.v)];
            hi = [hi[0].max(px.u), hi[1].max(px.v)];
        }
    }
    if lo[0].is_finite() {
        let clamp = |v: T, m: T| v.max(T::zero()).min(m);
        o.bbox = [clamp(lo[0], w), clamp(lo[1], h), clamp(hi[0], w), clamp(hi[1], h)];
    }
    o
}

pub fn export_detections<T: Real>(
    dets: &[Detection<T>],
    calib: &CalibrationSet<T>,
    image: (usize, usize),
    path: &Path,
) -> Result<()> {
    let objs: Vec<KittiObject<T>> = dets.iter().map(|d| detection_to_kitti(d, calib, image)).collect();
    write_labels(path, &objs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_half_rounds_up() {
        let mut h = BEVHeatmap::<f64>::zeros(3, 2, 1, 0.4, [0.0, 0.0]);
        h.score.iter_mut().for_each(|s| *s = 0.5);
        let bytes = heatmap_pgm(&h);
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert!(bytes[header.len()..].iter().all(|b| *b == 128));
        assert_eq!(bytes.len(), header.len() + 6);
    }
}
