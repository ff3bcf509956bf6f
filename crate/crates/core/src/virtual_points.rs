//! Virtual points from completed depth, and range-aware subsampling.

use std::path::Path;

use rand::seq::index;

use crate::calib::{back_project_pixel, cam_to_lidar, CalibrationSet, DepthMap};
use crate::error::{Error, Result};
use crate::fusion::Point8D;
use crate::rng;
use crate::Real;

/// RGB image with channels normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage<T> {
    width: usize,
    height: usize,
    pixels: Vec<[T; 3]>,
}

impl<T: Real> RgbImage<T> {
    pub fn new(width: usize, height: usize, pixels: Vec<[T; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::shape("RgbImage::new", width * height, pixels.len()));
        }
        if pixels
            .iter()
            .flatten()
            .any(|c| !(*c >= T::zero() && *c <= T::one()))
        {
            return Err(Error::invalid("pixels", "channel values must lie in [0, 1]"));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn uniform(width: usize, height: usize, rgb: [T; 3]) -> Result<Self> {
        Self::new(width, height, vec![rgb; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, u: usize, v: usize) -> [T; 3] {
        self.pixels[v * self.width + u]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let scale = T::lit(1.0 / 255.0);
        let pixels = img
            .pixels()
            .map(|p| {
                [
                    T::from_u8(p[0]).unwrap() * scale,
                    T::from_u8(p[1]).unwrap() * scale,
                    T::from_u8(p[2]).unwrap() * scale,
                ]
            })
            .collect();
        Self::new(w as usize, h as usize, pixels)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in buf.pixels_mut().enumerate() {
            let c = self.pixels[i];
            let q = |x: T| (x.to_f64_lossy() * 255.0).round().clamp(0.0, 255.0) as u8;
            *px = image::Rgb([q(c[0]), q(c[1]), q(c[2])]);
        }
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Back-projects every valid pixel with depth in `(0, max_range]` into a
/// LiDAR-frame virtual point carrying the pixel color (I = 0, τ = 1).
pub fn generate_virtual_points<T: Real>(
    dense_depth: &DepthMap<T>,
    image: &RgbImage<T>,
    calib: &CalibrationSet<T>,
    max_range: T,
) -> Result<Vec<Point8D<T>>> {
    if dense_depth.width() != image.width() || dense_depth.height() != image.height() {
        return Err(Error::shape(
            "generate_virtual_points",
            format!("{}x{}", image.width(), image.height()),
            format!("{}x{}", dense_depth.width(), dense_depth.height()),
        ));
    }
    let mut out = Vec::with_capacity(dense_depth.valid_count());
    for (u, v, d) in dense_depth.iter_valid() {
        if d > max_range {
            continue;
        }
        let cam = back_project_pixel(T::from_usize_lossy(u), T::from_usize_lossy(v), d, calib)?;
        out.push(Point8D::virtual_point(cam_to_lidar(&cam, calib), image.get(u, v)));
    }
    Ok(out)
}

/// Radial-bin subsampling parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeSampleConfig<T> {
    pub n_bins: usize,
    pub retain_fraction: T,
    pub near_threshold: T,
    pub max_range: T,
    pub seed: u64,
}

impl<T: Real> RangeSampleConfig<T> {
    /// Two bins, `r = 0.2`, 60 m threshold, 100 m envelope.
    pub fn training(seed: u64) -> Self {
        Self {
            n_bins: 2,
            retain_fraction: T::lit(0.2),
            near_threshold: T::lit(60.0),
            max_range: T::lit(100.0),
            seed,
        }
    }

    /// As [`Self::training`] but with ten bins.
    pub fn inference(seed: u64) -> Self {
        Self {
            n_bins: 10,
            ..Self::training(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bins == 0 {
            return Err(Error::invalid("n_bins", "must be at least 1"));
        }
        if !(self.retain_fraction > T::zero() && self.retain_fraction <= T::one()) {
            return Err(Error::invalid("retain_fraction", "must lie in (0, 1]"));
        }
        if !(self.near_threshold > T::zero() && self.near_threshold <= self.max_range) {
            return Err(Error::invalid("near_threshold", "must lie in (0, max_range]"));
        }
        Ok(())
    }
}

/// Subsamples near radial bins to `floor(r·n)` points each; points in bins
/// reaching past `near_threshold` (and anything beyond `max_range`) are kept.
/// Survivors keep their input order.
pub fn range_aware_sample<T: Real>(
    points: &[Point8D<T>],
    config: &RangeSampleConfig<T>,
) -> Result<Vec<Point8D<T>>> {
    config.validate()?;
    let bin_width = config.max_range / T::from_usize_lossy(config.n_bins);
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); config.n_bins];
    let mut keep = vec![false; points.len()];
    for (i, p) in points.iter().enumerate() {
        let r = p.horizontal_range();
        if r >= config.max_range {
            keep[i] = true;
            continue;
        }
        let b = (r / bin_width).floor().to_usize().unwrap_or(0).min(config.n_bins - 1);
        bins[b].push(i);
    }
    let mut rng = rng::seeded(config.seed);
    for (b, members) in bins.iter().enumerate() {
        let upper = bin_width * T::from_usize_lossy(b + 1);
        if upper > config.near_threshold {
            for &i in members {
                keep[i] = true;
            }
            continue;
        }
        let n = members.len();
        let quota = (config.retain_fraction * T::from_usize_lossy(n))
            .floor()
            .to_usize()
            .unwrap_or(0)
            .min(n);
        if quota == n {
            members.iter().for_each(|&i| keep[i] = true);
        } else {
            for j in index::sample(&mut rng, n, quota) {
                keep[members[j]] = true;
            }
        }
    }
    Ok(points
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(p, _)| *p)
        .collect())
}

/// Reads a dense depth map, choosing the format by extension:
/// `.png` is 16-bit grayscale in units of 1/256 m (0 = invalid); anything
/// else is `u32 width, u32 height` (little-endian) followed by row-major
/// `f32` meters.
pub fn read_depth_map<T: Real>(path: &Path) -> Result<DepthMap<T>> {
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma16();
        let (w, h) = img.dimensions();
        let scale = T::lit(1.0 / 256.0);
        let depths = img.pixels().map(|p| T::from_u16(p[0]).unwrap() * scale).collect();
        return DepthMap::from_depths(w as usize, h as usize, depths);
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::parse(path, 0, "missing width/height header"));
    }
    let w = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != w * h * 4 {
        return Err(Error::parse(
            path,
            0,
            format!("expected {} bytes of f32 data for {w}x{h}, found {}", w * h * 4, body.len()),
        ));
    }
    let depths = body
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    DepthMap::from_depths(w, h, depths)
}

/// Writes the binary float32 layout read by [`read_depth_map`]; invalid
/// pixels are stored as 0.
pub fn write_depth_map_bin<T: Real>(path: &Path, map: &DepthMap<T>) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + map.width() * map.height() * 4);
    bytes.extend_from_slice(&(map.width() as u32).to_le_bytes());
    bytes.extend_from_slice(&(map.height() as u32).to_le_bytes());
    for v in 0..map.height() {
        for u in 0..map.width() {
            let d = map.get(u, v).map_or(0.0, |d| d.to_f64_lossy() as f32);
            bytes.extend_from_slice(&d.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
