//! Deterministic synthetic scenes: a ray-cast spinning LiDAR and a pinhole
//! camera looking at a ground plane and oriented boxes.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::export::detection_to_kitti;
use super::kitti::{write_labels, FrameBundle};
use crate::calib::{cam_to_lidar, CalibrationSet, DepthMap};
use crate::error::{Error, Result};
use crate::fusion::write_velodyne;
use crate::head::{Box7, Detection, CLASSES};
use crate::rng;
use crate::virtual_points::{write_depth_map_bin, RgbImage};
use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub class: String,
    /// LiDAR frame.
    pub bbox: Box7<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    /// Ground height in the LiDAR frame.
    pub ground_z: f64,
    pub lidar_beams: usize,
    pub lidar_azimuth_steps: usize,
    /// Elevation limits in degrees.
    pub lidar_fov_up: f64,
    pub lidar_fov_down: f64,
    /// Azimuth window in degrees around +x; 360 is a full sweep.
    pub lidar_azimuth_fov: f64,
    pub max_range: f64,
    /// Standard deviation of LiDAR range noise, meters.
    pub noise: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub focal: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            objects: Vec::new(),
            ground_z: -1.73,
            lidar_beams: 64,
            lidar_azimuth_steps: 2048,
            lidar_fov_up: 2.0,
            lidar_fov_down: -24.8,
            lidar_azimuth_fov: 360.0,
            max_range: 100.0,
            noise: 0.0,
            image_width: 621,
            image_height: 188,
            focal: 360.0,
        }
    }
}

impl SceneSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// `key = value` lines; `object = CLASS x y z w l h theta` may repeat.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut s = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| Error::parse(path, i + 1, m);
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| v.parse::<f64>().map_err(|_| err(format!("bad value `{v}` for `{k}`")));
            let count = |v: &str| v.parse::<usize>().map_err(|_| err(format!("bad value `{v}` for `{k}`")));
            match k {
                "seed" => s.seed = v.parse().map_err(|_| err(format!("bad value `{v}` for `seed`")))?,
                "ground_z" => s.ground_z = num(v)?,
                "lidar_beams" => s.lidar_beams = count(v)?,
                "lidar_azimuth_steps" => s.lidar_azimuth_steps = count(v)?,
                "lidar_fov_up" => s.lidar_fov_up = num(v)?,
                "lidar_fov_down" => s.lidar_fov_down = num(v)?,
                "lidar_azimuth_fov" => s.lidar_azimuth_fov = num(v)?,
                "max_range" => s.max_range = num(v)?,
                "noise" => s.noise = num(v)?,
                "image_width" => s.image_width = count(v)?,
                "image_height" => s.image_height = count(v)?,
                "focal" => s.focal = num(v)?,
                "object" => {
                    let f: Vec<&str> = v.split_whitespace().collect();
                    if f.len() != 8 {
                        return Err(err("object needs `CLASS x y z w l h theta`".into()));
                    }
                    let n: Vec<f64> = f[1..].iter().map(|x| num(x)).collect::<Result<_>>()?;
                    let bbox = Box7::new([n[0], n[1], n[2]], [n[3], n[4], n[5]], n[6]).map_err(|e| err(e.to_string()))?;
                    s.objects.push(SceneObject {
                        class: f[0].to_string(),
                        bbox,
                    });
                }
                _ => return Err(err(format!("unknown key `{k}`"))),
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lidar_beams == 0 || self.lidar_azimuth_steps == 0 || self.image_width == 0 || self.image_height == 0 {
            return Err(Error::invalid("scene", "beam, azimuth and image counts must be positive"));
        }
        if !(self.lidar_fov_up > self.lidar_fov_down) {
            return Err(Error::invalid("lidar_fov_up", "must exceed lidar_fov_down"));
        }
        if !(self.max_range > 0.0 && self.focal > 0.0 && self.noise >= 0.0) {
            return Err(Error::invalid("scene", "max_range and focal must be positive, noise nonnegative"));
        }
        if !(self.lidar_azimuth_fov > 0.0 && self.lidar_azimuth_fov <= 360.0) {
            return Err(Error::invalid("lidar_azimuth_fov", "must lie in (0, 360]"));
        }
        Ok(())
    }

    /// KITTI-like rig: camera 0.27 m ahead of and 0.08 m below the LiDAR,
    /// principal point at the image center, no rectification rotation.
    pub fn calibration<T: Real>(&self) -> Result<CalibrationSet<T>> {
        let l = T::lit;
        let (o, z) = (T::one(), T::zero());
        let f = l(self.focal);
        let cu = l((self.image_width as f64 - 1.0) / 2.0);
        let cv = l((self.image_height as f64 - 1.0) / 2.0);
        CalibrationSet::new(
            [[f, z, cu, z], [z, f, cv, z], [z, z, o, z]],
            [[o, z, z], [z, o, z], [z, z, o]],
            [[z, -o, z, z], [z, z, -o, l(-0.08)], [o, z, z, l(-0.27)]],
        )
    }
}

/// Ray parameter of the first hit with `b` along `o + t·d`, `t > 0`.
pub fn ray_box<T: Real>(o: &[T; 3], d: &[T; 3], b: &Box7<T>) -> Option<T> {
    let (s, c) = b.theta.sin_cos();
    let rel = [o[0] - b.x, o[1] - b.y, o[2] - b.z];
    let lo = [c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]];
    let ld = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
    let half = [b.w, b.l, b.h].map(|v| v * T::lit(0.5));
    let (mut t0, mut t1) = (T::neg_infinity(), T::infinity());
    for a in 0..3 {
        if ld[a] == T::zero() {
            if lo[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let ta = (-half[a] - lo[a]) / ld[a];
        let tb = (half[a] - lo[a]) / ld[a];
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    if t0 > t1 || t1 <= T::zero() {
        return None;
    }
    Some(if t0 > T::zero() { t0 } else { t1 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Hit {
    Ground,
    Object(usize),
}

fn cast<T: Real>(o: &[T; 3], d: &[T; 3], boxes: &[Box7<T>], ground_z: T) -> Option<(T, Hit)> {
    let mut best: Option<(T, Hit)> = None;
    if d[2] < T::zero() {
        let t = (ground_z - o[2]) / d[2];
        if t > T::zero() {
            best = Some((t, Hit::Ground));
        }
    }
    for (k, b) in boxes.iter().enumerate() {
        if let Some(t) = ray_box(o, d, b) {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, Hit::Object(k)));
            }
        }
    }
    best
}

fn class_color(class: &str) -> [f64; 3] {
    match CLASSES.iter().position(|c| *c == class) {
        Some(0) => [0.8, 0.15, 0.1],
        Some(1) => [0.1, 0.6, 0.2],
        Some(2) => [0.15, 0.2, 0.8],
        _ => [0.7, 0.7, 0.1],
    }
}

/// Renders the scene. LiDAR density falls with range because beams are
/// spread uniformly in angle; the depth map is the exact camera depth of
/// the nearest surface at each integer pixel.
pub fn synth_scene<T: Real>(spec: &SceneSpec, id: &str) -> Result<FrameBundle<T>> {
    spec.validate()?;
    let calib = spec.calibration::<T>()?;
    let boxes: Vec<Box7<T>> = spec
        .objects
        .iter()
        .map(|o| Box7::from_array(o.bbox.to_array().map(T::lit)))
        .collect();
    let ground = T::lit(spec.ground_z);
    let max_range = T::lit(spec.max_range);
    let mut r = rng::seeded(spec.seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::invalid("noise", e.to_string()))?;

    let mut cloud = Vec::new();
    let origin = [T::zero(); 3];
    for i in 0..spec.lidar_beams {
        let frac = if spec.lidar_beams == 1 {
            0.5
        } else {
            i as f64 / (spec.lidar_beams - 1) as f64
        };
        let el = (spec.lidar_fov_down + frac * (spec.lidar_fov_up - spec.lidar_fov_down)).to_radians();
        for j in 0..spec.lidar_azimuth_steps {
            let az = ((j as f64 + 0.5) / spec.lidar_azimuth_steps as f64 - 0.5) * spec.lidar_azimuth_fov.to_radians();
            let d = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()].map(T::lit);
            let Some((t, hit)) = cast(&origin, &d, &boxes, ground) else {
                continue;
            };
            let t = t + T::lit(if spec.noise > 0.0 { noise.sample(&mut r) } else { 0.0 });
            if !(t > T::zero() && t <= max_range) {
                continue;
            }
            let intensity = match hit {
                Hit::Ground => 0.2,
                Hit::Object(_) => 0.6,
            } + r.gen_range(0.0..0.05);
            cloud.push([d[0] * t, d[1] * t, d[2] * t, T::lit(intensity)]);
        }
    }

    let k = calib.intrinsics();
    let cam_origin = cam_to_lidar(&[T::zero(); 3], &calib);
    let (w, h) = (spec.image_width, spec.image_height);
    let mut depths = vec![T::zero(); w * h];
    let mut pixels = vec![[T::lit(0.5), T::lit(0.7), T::lit(0.9)]; w * h];
    for v in 0..h {
        for u in 0..w {
            let ray = [
                (T::from_usize_lossy(u) - k.cu) / k.fu,
                (T::from_usize_lossy(v) - k.cv) / k.fv,
                T::one(),
            ];
            let p = cam_to_lidar(&ray, &calib);
            let d = [p[0] - cam_origin[0], p[1] - cam_origin[1], p[2] - cam_origin[2]];
            let Some((t, hit)) = cast(&cam_origin, &d, &boxes, ground) else {
                continue;
            };
            if t > max_range {
                continue;
            }
            depths[v * w + u] = t;
            pixels[v * w + u] = match hit {
                Hit::Ground => [T::lit(0.4); 3],
                Hit::Object(k) => class_color(&spec.objects[k].class).map(T::lit),
            };
        }
    }

    let labels = spec
        .objects
        .iter()
        .zip(&boxes)
        .map(|(o, b)| {
            let det = Detection {
                class: 0,
                bbox: *b,
                score: T::one(),
            };
            let mut obj = detection_to_kitti(&det, &calib, (w, h));
            obj.class = o.class.clone();
            obj.score = None;
            obj.truncation = truncation(&det, &calib, (w, h));
            obj
        })
        .collect();

    Ok(FrameBundle {
        id: id.to_string(),
        cloud,
        image: RgbImage::new(w, h, pixels)?,
        dense_depth: DepthMap::from_depths(w, h, depths)?,
        calib,
        labels,
    })
}

/// Fraction of the unclipped projected 2D box lying outside the image.
fn truncation<T: Real>(det: &Detection<T>, calib: &CalibrationSet<T>, image: (usize, usize)) -> T {
    let big = (usize::MAX / 4, usize::MAX / 4);
    let full = detection_to_kitti(det, calib, big).bbox;
    let clipped = detection_to_kitti(det, calib, image).bbox;
    let area = |b: &[T; 4]| (b[2] - b[0]).max(T::zero()) * (b[3] - b[1]).max(T::zero());
    let a = area(&full);
    if a > T::zero() {
        (T::one() - area(&clipped) / a).max(T::zero()).min(T::one())
    } else {
        T::one()
    }
}

/// Writes a frame in the layout read by [`super::kitti::load_frame`].
pub fn write_frame<T: Real>(root: &Path, frame: &FrameBundle<T>) -> Result<()> {
    for d in ["velodyne", "image_2", "calib", "depth_dense", "label_2"] {
        let p = root.join(d);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let id = &frame.id;
    write_velodyne(&root.join("velodyne").join(format!("{id}.bin")), &frame.cloud)?;
    frame.image.save_png(&root.join("image_2").join(format!("{id}.png")))?;
    let calib = root.join("calib").join(format!("{id}.txt"));
    std::fs::write(&calib, frame.calib.to_kitti_text()).map_err(|e| Error::io(&calib, e))?;
    write_depth_map_bin(&root.join("depth_dense").join(format!("{id}.bin")), &frame.dense_depth)?;
    write_labels::<T>(&root.join("label_2").join(format!("{id}.txt")), &frame.labels)
}
