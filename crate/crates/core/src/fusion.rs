//! 8-D point encoding, early fusion, point painting and near-field dropout.

use std::path::Path;

use rand::Rng;

use crate::calib::{self, project_lidar_to_image, CalibrationSet};
use crate::error::{Error, Result};
use crate::rng;
use crate::virtual_points::RgbImage;
use crate::Real;

/// Modality tag for points from the LiDAR sensor.
pub const TAU_REAL: u8 = 2;
/// Modality tag for points back-projected from completed depth.
pub const TAU_VIRTUAL: u8 = 1;

/// One fused point `[x, y, z, I, r, g, b, τ]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point8D<T> {
    pub x: T,
    pub y: T,
    pub z: T,
    pub intensity: T,
    pub r: T,
    pub g: T,
    pub b: T,
    pub tau: u8,
}

impl<T: Real> Point8D<T> {
    pub fn real(x: T, y: T, z: T, intensity: T) -> Self {
        Self {
            x,
            y,
            z,
            intensity,
            r: T::zero(),
            g: T::zero(),
            b: T::zero(),
            tau: TAU_REAL,
        }
    }

    pub fn virtual_point(pos: [T; 3], rgb: [T; 3]) -> Self {
        Self {
            x: pos[0],
            y: pos[1],
            z: pos[2],
            intensity: T::zero(),
            r: rgb[0],
            g: rgb[1],
            b: rgb[2],
            tau: TAU_VIRTUAL,
        }
    }

    pub fn position(&self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn horizontal_range(&self) -> T {
        self.x.hypot(self.y)
    }

    pub fn is_virtual(&self) -> bool {
        self.tau == TAU_VIRTUAL
    }

    /// The feature vector fed to the voxel backbone and point embedding.
    pub fn features(&self) -> [T; 8] {
        [
            self.x,
            self.y,
            self.z,
            self.intensity,
            self.r,
            self.g,
            self.b,
            T::from_u8(self.tau).unwrap_or_else(T::zero),
        ]
    }
}

/// Real points first, then virtual, with per-modality counts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FusedCloud<T> {
    points: Vec<Point8D<T>>,
    n_real: usize,
    n_virtual: usize,
}

impl<T: Real> FusedCloud<T> {
    /// Tallies tags from an arbitrary point list.
    pub fn from_points(points: Vec<Point8D<T>>) -> Self {
        let n_virtual = points.iter().filter(|p| p.is_virtual()).count();
        Self {
            n_real: points.len() - n_virtual,
            n_virtual,
            points,
        }
    }

    pub fn points(&self) -> &[Point8D<T>] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point8D<T>> {
        self.points
    }

    pub fn n_real(&self) -> usize {
        self.n_real
    }

    pub fn n_virtual(&self) -> usize {
        self.n_virtual
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keeps the points for which `keep` holds, recounting tags.
    pub fn retain(mut self, mut keep: impl FnMut(&Point8D<T>) -> bool) -> Self {
        self.points.retain(|p| keep(p));
        Self::from_points(self.points)
    }
}

/// Encodes raw `(x, y, z, intensity)` returns: rgb zeroed, τ = 2.
pub fn encode_lidar<T: Real>(raw: &[[T; 4]]) -> Result<Vec<Point8D<T>>> {
    raw.iter()
        .enumerate()
        .map(|(i, p)| {
            if p[..3].iter().any(|c| !c.is_finite()) {
                return Err(Error::invalid("raw", format!("point {i} has non-finite coordinates")));
            }
            Ok(Point8D::real(p[0], p[1], p[2], p[3]))
        })
        .collect()
}

/// Colors each in-frame point with its nearest pixel. Points behind the
/// camera or outside the image keep their color.
pub fn paint_points<T: Real>(
    real: &[Point8D<T>],
    image: &RgbImage<T>,
    calib: &CalibrationSet<T>,
) -> Vec<Point8D<T>> {
    real.iter()
        .map(|p| {
            let mut out = *p;
            if let Ok(px) = project_lidar_to_image(&p.position(), calib, None) {
                if let Some((u, v)) = calib::nearest_pixel(px.u, px.v, image.width(), image.height()) {
                    let [r, g, b] = image.get(u, v);
                    out.r = r;
                    out.g = g;
                    out.b = b;
                }
            }
            out
        })
        .collect()
}

/// Concatenates real then virtual points. Rejects mis-tagged inputs.
pub fn early_fuse<T: Real>(real: &[Point8D<T>], virt: &[Point8D<T>]) -> Result<FusedCloud<T>> {
    if let Some(i) = real.iter().position(|p| p.tau != TAU_REAL) {
        return Err(Error::invalid("real", format!("point {i} is not tagged τ=2")));
    }
    if let Some(i) = virt.iter().position(|p| p.tau != TAU_VIRTUAL) {
        return Err(Error::invalid("virtual", format!("point {i} is not tagged τ=1")));
    }
    let mut points = Vec::with_capacity(real.len() + virt.len());
    points.extend_from_slice(real);
    points.extend_from_slice(virt);
    Ok(FusedCloud {
        points,
        n_real: real.len(),
        n_virtual: virt.len(),
    })
}

/// Drops each point with horizontal range below `radius` with probability
/// `drop_prob`. Far points are never touched.
pub fn near_field_dropout<T: Real>(
    cloud: FusedCloud<T>,
    radius: T,
    drop_prob: f64,
    seed: u64,
) -> Result<FusedCloud<T>> {
    if !(0.0..=1.0).contains(&drop_prob) {
        return Err(Error::invalid("drop_prob", format!("{drop_prob} not in [0, 1]")));
    }
    let mut rng = rng::seeded(seed);
    Ok(cloud.retain(|p| {
        if p.horizontal_range() >= radius {
            return true;
        }
        // One draw per near point keeps the stream aligned with input order.
        rng.gen::<f64>() >= drop_prob
    }))
}

/// Reads a KITTI velodyne scan: little-endian `f32` quadruples, no header.
pub fn read_velodyne<T: Real>(path: &Path) -> Result<Vec<[T; 4]>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_velodyne(&bytes, path)
}

pub fn parse_velodyne<T: Real>(bytes: &[u8], path: &Path) -> Result<Vec<[T; 4]>> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::parse(
            path,
            0,
            format!("length {} is not a multiple of 16 bytes", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(16)
        .map(|rec| {
            let f = |k: usize| {
                let v = f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap());
                T::lit(v as f64)
            };
            [f(0), f(1), f(2), f(3)]
        })
        .collect())
}

pub fn write_velodyne<T: Real>(path: &Path, points: &[[T; 4]]) -> Result<()> {
    let mut bytes = Vec::with_capacity(points.len() * 16);
    for p in points {
        for c in p {
            bytes.extend_from_slice(&(c.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
