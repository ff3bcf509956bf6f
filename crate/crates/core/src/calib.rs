//! LiDAR ↔ camera ↔ pixel transforms and sparse depth rendering.
//!
//! The forward chain is `pixel ~ P2 · R0 · T_lidar→cam · p̃`, with the
//! homogeneous image coordinate divided by its third component. Depth is the
//! z coordinate of the rectified camera-frame point `R0 · T · p̃`; the
//! translation column of `P2` does not enter it.

use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat3, Mat3x4, Mat4, Vec3};
use crate::Real;

/// Tolerance on `R·Rᵀ = I` for the rotation blocks of `R0` and `T`.
pub const ORTHONORMAL_TOL: f64 = 1e-6;

/// Pinhole intrinsics read off `P2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics<T> {
    pub fu: T,
    pub fv: T,
    pub cu: T,
    pub cv: T,
}

/// Calibration matrices for one camera/LiDAR pair.
///
/// Construction validates the invariants (orthonormal rotation blocks,
/// positive focal lengths, rigid bottom row) and caches the inverses used by
/// [`cam_to_lidar`].
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet<T> {
    p2: Mat3x4<T>,
    r0: Mat4<T>,
    t_lidar_to_cam: Mat4<T>,
    intrinsics: Intrinsics<T>,
    r0_inv: Mat3<T>,
    t_cam_to_lidar: Mat4<T>,
}

impl<T: Real> CalibrationSet<T> {
    /// Builds a calibration from the KITTI-shaped blocks: `P2` (3×4),
    /// `R0_rect` (3×3) and `Tr_velo_to_cam` (3×4).
    pub fn new(p2: Mat3x4<T>, r0_rect: Mat3<T>, tr_velo_to_cam: Mat3x4<T>) -> Result<Self> {
        let mut r0 = linalg::identity4();
        for i in 0..3 {
            for j in 0..3 {
                r0[i][j] = r0_rect[i][j];
            }
        }
        let mut t = linalg::identity4();
        t[..3].copy_from_slice(&tr_velo_to_cam);
        Self::from_matrices(p2, r0, t)
    }

    /// Builds a calibration from homogeneous 4×4 `R0` and `T`.
    pub fn from_matrices(p2: Mat3x4<T>, r0: Mat4<T>, t_lidar_to_cam: Mat4<T>) -> Result<Self> {
        let tol = T::lit(ORTHONORMAL_TOL);
        let r0_rot = linalg::upper3(&r0);
        if linalg::orthonormality_error(&r0_rot) > tol {
            return Err(Error::Calibration("R0 rotation block is not orthonormal".into()));
        }
        let r0_expanded = (0..3).all(|i| r0[i][3] == T::zero() && r0[3][i] == T::zero())
            && r0[3][3] == T::one();
        if !r0_expanded {
            return Err(Error::Calibration(
                "R0 must be a homogeneous-expanded rotation".into(),
            ));
        }
        let t_rot = linalg::upper3(&t_lidar_to_cam);
        if linalg::orthonormality_error(&t_rot) > tol {
            return Err(Error::Calibration(
                "T_lidar_to_cam rotation block is not orthonormal".into(),
            ));
        }
        let bottom = t_lidar_to_cam[3];
        if bottom != [T::zero(), T::zero(), T::zero(), T::one()] {
            return Err(Error::Calibration(
                "T_lidar_to_cam bottom row must be (0,0,0,1)".into(),
            ));
        }
        let intrinsics = Intrinsics {
            fu: p2[0][0],
            fv: p2[1][1],
            cu: p2[0][2],
            cv: p2[1][2],
        };
        if !(intrinsics.fu > T::zero() && intrinsics.fv > T::zero()) {
            return Err(Error::Calibration("focal lengths must be positive".into()));
        }
        if p2.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Calibration("P2 has non-finite entries".into()));
        }

        // Near-orthonormal blocks are inverted exactly rather than transposed
        // so the round trip holds to rounding error.
        let r0_inv = linalg::inv3(&r0_rot)
            .ok_or_else(|| Error::Calibration("R0 is singular".into()))?;
        let rot_inv = linalg::inv3(&t_rot)
            .ok_or_else(|| Error::Calibration("T_lidar_to_cam is singular".into()))?;
        let trans = [t_lidar_to_cam[0][3], t_lidar_to_cam[1][3], t_lidar_to_cam[2][3]];
        let back = linalg::mul3_vec(&rot_inv, &trans);
        let mut t_cam_to_lidar = linalg::identity4();
        for i in 0..3 {
            for j in 0..3 {
                t_cam_to_lidar[i][j] = rot_inv[i][j];
            }
            t_cam_to_lidar[i][3] = -back[i];
        }

        Ok(Self {
            p2,
            r0,
            t_lidar_to_cam,
            intrinsics,
            r0_inv,
            t_cam_to_lidar,
        })
    }

    /// Identity extrinsics with the given intrinsics.
    pub fn pinhole(fu: T, fv: T, cu: T, cv: T) -> Result<Self> {
        let z = T::zero();
        let p2 = [[fu, z, cu, z], [z, fv, cv, z], [z, z, T::one(), z]];
        Self::from_matrices(p2, linalg::identity4(), linalg::identity4())
    }

    pub fn p2(&self) -> &Mat3x4<T> {
        &self.p2
    }

    pub fn r0(&self) -> &Mat4<T> {
        &self.r0
    }

    pub fn t_lidar_to_cam(&self) -> &Mat4<T> {
        &self.t_lidar_to_cam
    }

    pub fn intrinsics(&self) -> Intrinsics<T> {
        self.intrinsics
    }

    /// `R0 · T_lidar→cam · p̃`, the rectified camera-frame point.
    pub fn lidar_to_cam(&self, p: &Vec3<T>) -> Vec3<T> {
        let h = [p[0], p[1], p[2], T::one()];
        let c = linalg::mul4_vec(&self.r0, &linalg::mul4_vec(&self.t_lidar_to_cam, &h));
        [c[0], c[1], c[2]]
    }

    /// Rotates a LiDAR-frame direction into the rectified camera frame.
    pub fn lidar_dir_to_cam(&self, d: &Vec3<T>) -> Vec3<T> {
        let h = [d[0], d[1], d[2], T::zero()];
        let c = linalg::mul4_vec(&self.r0, &linalg::mul4_vec(&self.t_lidar_to_cam, &h));
        [c[0], c[1], c[2]]
    }

    /// Parses the KITTI calibration text layout (`P2:`, `R0_rect:`,
    /// `Tr_velo_to_cam:` lines; other keys ignored).
    pub fn parse_kitti(text: &str, path: &Path) -> Result<Self> {
        let mut p2 = None;
        let mut r0 = None;
        let mut tr = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, rest)) = line.split_once(':') else {
                return Err(Error::parse(path, lineno + 1, "expected `key: values`"));
            };
            let want = match key.trim() {
                "P2" => 12,
                "R0_rect" => 9,
                "Tr_velo_to_cam" => 12,
                _ => continue,
            };
            let values = rest
                .split_whitespace()
                .map(|s| {
                    s.parse::<f64>().map_err(|e| {
                        Error::parse(path, lineno + 1, format!("bad number `{s}`: {e}"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if values.len() != want {
                return Err(Error::parse(
                    path,
                    lineno + 1,
                    format!("`{}` needs {want} values, found {}", key.trim(), values.len()),
                ));
            }
            let v: Vec<T> = values.into_iter().map(T::lit).collect();
            match key.trim() {
                "P2" => p2 = Some(rows34(&v)),
                "R0_rect" => {
                    r0 = Some([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
                }
                _ => tr = Some(rows34(&v)),
            }
        }
        let missing = |key: &str| Error::MissingKey {
            path: path.to_path_buf(),
            key: key.to_string(),
        };
        let p2 = p2.ok_or_else(|| missing("P2"))?;
        let r0 = r0.ok_or_else(|| missing("R0_rect"))?;
        let tr = tr.ok_or_else(|| missing("Tr_velo_to_cam"))?;
        Self::new(p2, r0, tr)
    }

    pub fn load_kitti(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_kitti(&text, path)
    }

    /// Renders the calibration in the KITTI text layout.
    pub fn to_kitti_text(&self) -> String {
        let fmt = |vals: Vec<T>| {
            vals.iter()
                .map(|v| format!("{:e}", v.to_f64_lossy()))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let p2: Vec<T> = self.p2.iter().flatten().copied().collect();
        let r0: Vec<T> = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| self.r0[i][j]).collect();
        let tr: Vec<T> = self.t_lidar_to_cam[..3].iter().flatten().copied().collect();
        format!(
            "P2: {}\nR0_rect: {}\nTr_velo_to_cam: {}\n",
            fmt(p2),
            fmt(r0),
            fmt(tr)
        )
    }
}

fn rows34<T: Real>(v: &[T]) -> Mat3x4<T> {
    [
        [v[0], v[1], v[2], v[3]],
        [v[4], v[5], v[6], v[7]],
        [v[8], v[9], v[10], v[11]],
    ]
}

/// A projected point: sub-pixel coordinates and camera-frame depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelDepth<T> {
    pub u: T,
    pub v: T,
    pub depth: T,
}

/// Why a point has no pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionMiss {
    /// Camera-frame depth ≤ 0.
    Behind,
    /// Projects outside the supplied image bounds.
    OutOfFrame,
}

/// Projects a LiDAR-frame point. When `bounds = Some((w, h))` the pixel must
/// fall inside `[0, w) × [0, h)`.
pub fn project_lidar_to_image<T: Real>(
    p_lidar: &Vec3<T>,
    calib: &CalibrationSet<T>,
    bounds: Option<(usize, usize)>,
) -> std::result::Result<PixelDepth<T>, ProjectionMiss> {
    let c = calib.lidar_to_cam(p_lidar);
    project_cam_to_image(&c, calib, bounds)
}

/// Projects a rectified camera-frame point.
pub fn project_cam_to_image<T: Real>(
    c: &Vec3<T>,
    calib: &CalibrationSet<T>,
    bounds: Option<(usize, usize)>,
) -> std::result::Result<PixelDepth<T>, ProjectionMiss> {
    let depth = c[2];
    if !(depth > T::zero()) {
        return Err(ProjectionMiss::Behind);
    }
    let img = linalg::mul34_vec(calib.p2(), &[c[0], c[1], c[2], T::one()]);
    if !(img[2] > T::zero()) {
        return Err(ProjectionMiss::Behind);
    }
    let u = img[0] / img[2];
    let v = img[1] / img[2];
    if let Some((w, h)) = bounds {
        let inside = u >= T::zero()
            && v >= T::zero()
            && u < T::from_usize_lossy(w)
            && v < T::from_usize_lossy(h);
        if !inside {
            return Err(ProjectionMiss::OutOfFrame);
        }
    }
    Ok(PixelDepth { u, v, depth })
}

/// Pinhole inverse: `depth · ((u − c_u)/f_u, (v − c_v)/f_v, 1)`.
pub fn back_project_pixel<T: Real>(u: T, v: T, depth: T, calib: &CalibrationSet<T>) -> Result<Vec3<T>> {
    if !(depth > T::zero()) {
        return Err(Error::invalid("depth", format!("must be positive, got {depth}")));
    }
    let k = calib.intrinsics();
    Ok([depth * (u - k.cu) / k.fu, depth * (v - k.cv) / k.fv, depth])
}

/// `T_cam→lidar · R0⁻¹ · p_cam`.
pub fn cam_to_lidar<T: Real>(p_cam: &Vec3<T>, calib: &CalibrationSet<T>) -> Vec3<T> {
    let unrect = linalg::mul3_vec(&calib.r0_inv, p_cam);
    let h = [unrect[0], unrect[1], unrect[2], T::one()];
    let l = linalg::mul4_vec(&calib.t_cam_to_lidar, &h);
    [l[0], l[1], l[2]]
}

/// Per-pixel depth grid with a validity mask. Invalid pixels are never read.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<T> {
    width: usize,
    height: usize,
    values: Vec<T>,
    valid: Vec<bool>,
}

impl<T: Real> DepthMap<T> {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![T::zero(); width * height],
            valid: vec![false; width * height],
        }
    }

    /// Builds a map from row-major depths; non-positive or non-finite
    /// entries become invalid.
    pub fn from_depths(width: usize, height: usize, depths: Vec<T>) -> Result<Self> {
        if depths.len() != width * height {
            return Err(Error::shape("DepthMap::from_depths", width * height, depths.len()));
        }
        let valid: Vec<bool> = depths.iter().map(|d| d.is_finite() && *d > T::zero()).collect();
        let values = depths
            .into_iter()
            .zip(&valid)
            .map(|(d, ok)| if *ok { d } else { T::zero() })
            .collect();
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, u: usize, v: usize) -> Option<T> {
        if u >= self.width || v >= self.height {
            return None;
        }
        let i = v * self.width + u;
        self.valid[i].then(|| self.values[i])
    }

    pub fn set(&mut self, u: usize, v: usize, depth: T) {
        let i = v * self.width + u;
        self.values[i] = depth;
        self.valid[i] = depth > T::zero();
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Iterates `(u, v, depth)` over valid pixels in row-major order.
    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        self.valid
            .iter()
            .enumerate()
            .filter(|(_, ok)| **ok)
            .map(move |(i, _)| (i % self.width, i / self.width, self.values[i]))
    }
}

/// Nearest-integer pixel for a projected coordinate, if inside the frame.
pub(crate) fn nearest_pixel<T: Real>(u: T, v: T, width: usize, height: usize) -> Option<(usize, usize)> {
    let pu = u.round();
    let pv = v.round();
    if pu < T::zero() || pv < T::zero() {
        return None;
    }
    let (pu, pv) = (pu.to_usize()?, pv.to_usize()?);
    (pu < width && pv < height).then_some((pu, pv))
}

/// Z-buffers LiDAR points into a sparse depth image; behind-camera and
/// out-of-frame points are skipped, and the nearest depth wins per pixel.
pub fn render_sparse_depth<T: Real>(
    points: &[Vec3<T>],
    calib: &CalibrationSet<T>,
    width: usize,
    height: usize,
) -> Result<DepthMap<T>> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("width/height", "must be positive"));
    }
    let mut map = DepthMap::empty(width, height);
    for p in points {
        let Ok(px) = project_lidar_to_image(p, calib, None) else {
            continue;
        };
        let Some((u, v)) = nearest_pixel(px.u, px.v, width, height) else {
            continue;
        };
        match map.get(u, v) {
            Some(existing) if existing <= px.depth => {}
            _ => map.set(u, v, px.depth),
        }
    }
    Ok(map)
}
