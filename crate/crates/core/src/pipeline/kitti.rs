//! KITTI label lines, frame directories and ingestion filters.

use std::path::{Path, PathBuf};

use super::config::{Difficulty, PipelineConfig};
use crate::calib::{cam_to_lidar, CalibrationSet, DepthMap};
use crate::error::{Error, Result};
use crate::fusion::read_velodyne;
use crate::head::Box7;
use crate::scalar::wrap_angle;
use crate::virtual_points::{read_depth_map, RgbImage};
use crate::Real;

/// One line of a KITTI label or detection file.
#[derive(Debug, Clone, PartialEq)]
pub struct KittiObject<T> {
    pub class: String,
    pub truncation: T,
    pub occlusion: i32,
    pub alpha: T,
    /// `left, top, right, bottom` in pixels.
    pub bbox: [T; 4],
    /// `h, w, l` in meters; `l` runs along the heading.
    pub dims: [T; 3],
    /// Bottom-center in rectified camera coordinates.
    pub location: [T; 3],
    pub rotation_y: T,
    pub score: Option<T>,
}

impl<T: Real> KittiObject<T> {
    pub fn parse_line(line: &str, path: &Path, line_no: usize) -> Result<Self> {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 15 && f.len() != 16 {
            return Err(Error::parse(path, line_no, format!("expected 15 or 16 fields, found {}", f.len())));
        }
        let num = |i: usize| -> Result<T> {
            f[i].parse::<f64>()
                .map(T::lit)
                .map_err(|_| Error::parse(path, line_no, format!("field {} `{}` is not a number", i + 1, f[i])))
        };
        let occlusion = f[2]
            .parse::<f64>()
            .map(|v| v as i32)
            .map_err(|_| Error::parse(path, line_no, format!("occlusion `{}` is not a number", f[2])))?;
        Ok(Self {
            class: f[0].to_string(),
            truncation: num(1)?,
            occlusion,
            alpha: num(3)?,
            bbox: [num(4)?, num(5)?, num(6)?, num(7)?],
            dims: [num(8)?, num(9)?, num(10)?],
            location: [num(11)?, num(12)?, num(13)?],
            rotation_y: num(14)?,
            score: if f.len() == 16 { Some(num(15)?) } else { None },
        })
    }

    pub fn to_line(&self) -> String {
        let v = |x: T| format!("{:.2}", x.to_f64_lossy());
        let mut s = format!(
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            self.class,
            v(self.truncation),
            self.occlusion,
            v(self.alpha),
            v(self.bbox[0]),
            v(self.bbox[1]),
            v(self.bbox[2]),
            v(self.bbox[3]),
            v(self.dims[0]),
            v(self.dims[1]),
            v(self.dims[2]),
            v(self.location[0]),
            v(self.location[1]),
            v(self.location[2]),
            v(self.rotation_y),
        );
        if let Some(score) = self.score {
            s.push_str(&format!(" {:.4}", score.to_f64_lossy()));
        }
        s
    }

    pub fn is_dont_care(&self) -> bool {
        self.class == "DontCare"
    }

    pub fn bbox_height(&self) -> T {
        self.bbox[3] - self.bbox[1]
    }

    /// The easiest bucket this object qualifies for.
    pub fn difficulty(&self) -> Option<Difficulty> {
        Difficulty::ALL.into_iter().find(|d| self.fits(*d))
    }

    /// True when the object passes the bucket's cutoffs.
    pub fn fits(&self, d: Difficulty) -> bool {
        let (min_h, max_occ, max_trunc) = d.limits();
        self.bbox_height().to_f64_lossy() >= min_h
            && self.occlusion <= max_occ
            && self.truncation.to_f64_lossy() <= max_trunc
    }

    /// Box in a z-up camera-aligned frame: `(x_cam, z_cam, −y_cam)`, used
    /// for evaluation without a calibration.
    pub fn eval_box(&self) -> Result<Box7<T>> {
        let [h, w, l] = self.dims;
        let [x, y, z] = self.location;
        let half = T::lit(0.5);
        Box7::new([x, z, -y + h * half], [l, w, h], -self.rotation_y)
    }

    /// Box in the LiDAR frame.
    pub fn lidar_box(&self, calib: &CalibrationSet<T>) -> Result<Box7<T>> {
        let [h, w, l] = self.dims;
        let [x, y, z] = self.location;
        let half = T::lit(0.5);
        let center_cam = [x, y - h * half, z];
        let center = cam_to_lidar(&center_cam, calib);
        let (s, c) = self.rotation_y.sin_cos();
        let ahead = cam_to_lidar(&[x + c, y - h * half, z - s], calib);
        let theta = (ahead[1] - center[1]).atan2(ahead[0] - center[0]);
        Box7::new(center, [l, w, h], theta)
    }

    /// Camera-frame fields for a LiDAR-frame box (inverse of
    /// [`Self::lidar_box`]); `bbox`, `alpha` and truncation come from the
    /// projection and are computed by the caller.
    pub fn from_lidar_box(class: &str, b: &Box7<T>, calib: &CalibrationSet<T>, score: Option<T>) -> Self {
        let half = T::lit(0.5);
        let c = calib.lidar_to_cam(&b.center());
        let (s, co) = b.theta.sin_cos();
        let a = calib.lidar_to_cam(&[b.x + co, b.y + s, b.z]);
        // Heading direction in camera is (cos ry, ·, −sin ry).
        let ry = wrap_angle((-(a[2] - c[2])).atan2(a[0] - c[0]));
        let alpha = wrap_angle(ry - c[0].atan2(c[2]));
        Self {
            class: class.to_string(),
            truncation: T::zero(),
            occlusion: 0,
            alpha,
            bbox: [T::zero(); 4],
            dims: [b.h, b.l, b.w],
            location: [c[0], c[1] + b.h * half, c[2]],
            rotation_y: ry,
            score,
        }
    }
}

pub fn parse_labels<T: Real>(text: &str, path: &Path) -> Result<Vec<KittiObject<T>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| KittiObject::parse_line(l, path, i + 1))
        .collect()
}

pub fn read_labels<T: Real>(path: &Path) -> Result<Vec<KittiObject<T>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, path)
}

pub fn write_labels<T: Real>(path: &Path, objects: &[KittiObject<T>]) -> Result<()> {
    let mut text = String::new();
    for o in objects {
        text.push_str(&o.to_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Everything known about one frame.
#[derive(Debug, Clone)]
pub struct FrameBundle<T> {
    pub id: String,
    pub cloud: Vec<[T; 4]>,
    pub image: RgbImage<T>,
    pub dense_depth: DepthMap<T>,
    pub calib: CalibrationSet<T>,
    pub labels: Vec<KittiObject<T>>,
}

/// File locations of a frame inside a KITTI-style directory.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePaths {
    pub velodyne: PathBuf,
    pub image: PathBuf,
    pub calib: PathBuf,
    pub depth: PathBuf,
    pub labels: Option<PathBuf>,
}

impl FramePaths {
    /// `velodyne/ID.bin`, `image_2/ID.png`, `calib/ID.txt`,
    /// `depth_dense/ID.{png,bin}` and optional `label_2/ID.txt`.
    pub fn in_dir(root: &Path, id: &str) -> Self {
        let png = root.join("depth_dense").join(format!("{id}.png"));
        let depth = if png.exists() {
            png
        } else {
            root.join("depth_dense").join(format!("{id}.bin"))
        };
        let labels = root.join("label_2").join(format!("{id}.txt"));
        Self {
            velodyne: root.join("velodyne").join(format!("{id}.bin")),
            image: root.join("image_2").join(format!("{id}.png")),
            calib: root.join("calib").join(format!("{id}.txt")),
            depth,
            labels: labels.exists().then_some(labels),
        }
    }
}

/// Frame ids (file stems of `velodyne/*.bin`), sorted.
pub fn list_frames(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("velodyne");
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ids = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(&dir, e))?.path();
        if p.extension().is_some_and(|x| x == "bin") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn load_frame<T: Real>(id: &str, paths: &FramePaths) -> Result<FrameBundle<T>> {
    let calib = CalibrationSet::load_kitti(&paths.calib)?;
    let cloud = read_velodyne(&paths.velodyne)?;
    let image = RgbImage::load(&paths.image)?;
    let dense_depth = read_depth_map(&paths.depth)?;
    if dense_depth.width() != image.width() || dense_depth.height() != image.height() {
        return Err(Error::parse(
            &paths.depth,
            0,
            format!(
                "depth is {}x{} but the image is {}x{}",
                dense_depth.width(),
                dense_depth.height(),
                image.width(),
                image.height()
            ),
        ));
    }
    let labels = match &paths.labels {
        Some(p) => read_labels(p)?,
        None => Vec::new(),
    };
    Ok(FrameBundle {
        id: id.to_string(),
        cloud,
        image,
        dense_depth,
        calib,
        labels,
    })
}

/// Number of points inside `b` (LiDAR frame).
pub fn points_in_box<T: Real>(cloud: &[[T; 4]], b: &Box7<T>) -> usize {
    let (s, c) = b.theta.sin_cos();
    let half = T::lit(0.5);
    cloud
        .iter()
        .filter(|p| {
            let (dx, dy) = (p[0] - b.x, p[1] - b.y);
            let lx = c * dx + s * dy;
            let ly = -s * dx + c * dy;
            lx.abs() <= b.w * half && ly.abs() <= b.l * half && (p[2] - b.z).abs() <= b.h * half
        })
        .count()
}

/// Keeps labels whose easiest bucket is in the difficulty filter and that
/// hold at least the class's minimum point count. Classes absent from the
/// min-points map have no minimum; `DontCare` is always dropped.
pub fn filter_labels<T: Real>(frame: &FrameBundle<T>, cfg: &PipelineConfig) -> Result<Vec<KittiObject<T>>> {
    let mut out = Vec::new();
    for o in &frame.labels {
        if o.is_dont_care() {
            continue;
        }
        match o.difficulty() {
            Some(d) if cfg.difficulty_filter.contains(&d) => {}
            _ => continue,
        }
        if let Some(&min) = cfg.min_points.get(&o.class) {
            if points_in_box(&frame.cloud, &o.lidar_box(&frame.calib)?) < min {
                continue;
            }
        }
        out.push(o.clone());
    }
    Ok(out)
}
