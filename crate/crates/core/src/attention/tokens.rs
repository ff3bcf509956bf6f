//! Key/value token banks: voxel KNN and range-view point KNN.

use std::cmp::Ordering;

use crate::backbone::SparseTensor3D;
use crate::error::{Error, Result};
use crate::fusion::Point8D;
use crate::nn::Linear;
use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Token<T> {
    pub position: [T; 3],
    pub feature: Vec<T>,
}

/// Fixed-length bank of tokens. Slots with `mask[i] == false` are padding:
/// zero features, never attended to.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBank<T> {
    pub positions: Vec<[T; 3]>,
    pub features: Vec<T>,
    pub width: usize,
    pub mask: Vec<bool>,
}

impl<T: Real> TokenBank<T> {
    pub fn empty(width: usize) -> Self {
        Self {
            positions: Vec::new(),
            features: Vec::new(),
            width,
            mask: Vec::new(),
        }
    }

    pub fn from_tokens(tokens: &[Token<T>], width: usize, slots: usize) -> Result<Self> {
        let mut bank = Self::empty(width);
        for t in tokens.iter().take(slots) {
            if t.feature.len() != width {
                return Err(Error::shape("token width", width, t.feature.len()));
            }
            bank.push(t.position, &t.feature, true);
        }
        while bank.len() < slots {
            bank.push([T::zero(); 3], &vec![T::zero(); width], false);
        }
        Ok(bank)
    }

    pub fn push(&mut self, position: [T; 3], feature: &[T], valid: bool) {
        self.positions.push(position);
        self.features.extend_from_slice(feature);
        self.mask.push(valid);
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn feature(&self, j: usize) -> &[T] {
        &self.features[j * self.width..(j + 1) * self.width]
    }

    pub fn token(&self, j: usize) -> Token<T> {
        Token {
            position: self.positions[j],
            feature: self.feature(j).to_vec(),
        }
    }

    /// Concatenation into one bank; widths must agree.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.width != other.width {
            return Err(Error::shape("bank concat width", self.width, other.width));
        }
        let mut out = self.clone();
        out.positions.extend_from_slice(&other.positions);
        out.features.extend_from_slice(&other.features);
        out.mask.extend_from_slice(&other.mask);
        Ok(out)
    }

    /// Same slots with each valid feature mapped through `proj`.
    pub fn project(&self, proj: &Linear<T>) -> Result<Self> {
        if proj.in_dim != self.width {
            return Err(Error::shape("bank projection input", proj.in_dim, self.width));
        }
        let mut out = Self::empty(proj.out_dim);
        let zero = vec![T::zero(); proj.out_dim];
        for j in 0..self.len() {
            if self.mask[j] {
                out.push(self.positions[j], &proj.forward(self.feature(j)), true);
            } else {
                out.push(self.positions[j], &zero, false);
            }
        }
        Ok(out)
    }
}

fn sq_dist<T: Real>(a: &[T; 3], b: &[T; 3]) -> T {
    (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum()
}

fn by_dist_then<T: Real, K: Ord>(a: &(T, K), b: &(T, K)) -> Ordering {
    a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(&b.1))
}

/// Metric placement of a sparse tensor's integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelFrame<T> {
    pub voxel_size: T,
    pub origin: [T; 3],
}

impl<T: Real> VoxelFrame<T> {
    pub fn center(&self, c: &[i32; 3], stride: u32) -> [T; 3] {
        let size = self.voxel_size * T::from_u32(stride).unwrap_or_else(T::one);
        let half = T::lit(0.5);
        [0, 1, 2].map(|k| self.origin[k] + (T::from_i32(c[k]).unwrap_or_else(T::zero) + half) * size)
    }
}

/// The `k` active voxels closest to `center` (ties by coordinate), padded
/// with masked slots up to `k`.
pub fn gather_voxel_tokens<T: Real>(
    center: &[T; 3],
    voxels: &SparseTensor3D<T>,
    frame: &VoxelFrame<T>,
    k: usize,
) -> Result<TokenBank<T>> {
    if k < 1 {
        return Err(Error::invalid("k_voxel", "must be at least 1"));
    }
    let mut ranked: Vec<(T, ([i32; 3], usize))> = voxels
        .coords()
        .iter()
        .enumerate()
        .map(|(i, c)| (sq_dist(&frame.center(c, voxels.stride()), center), (*c, i)))
        .collect();
    ranked.sort_by(by_dist_then);
    let tokens: Vec<Token<T>> = ranked
        .iter()
        .take(k)
        .map(|(_, (c, i))| Token {
            position: frame.center(c, voxels.stride()),
            feature: voxels.feature(*i).to_vec(),
        })
        .collect();
    TokenBank::from_tokens(&tokens, voxels.channels(), k)
}

/// Points bucketed by azimuth and inclination as seen from the sensor.
#[derive(Debug, Clone)]
pub struct RangeViewIndex<T> {
    azimuth_bins: usize,
    inclination_bins: usize,
    min_incl: T,
    incl_step: T,
    cells: Vec<Vec<u32>>,
    positions: Vec<[T; 3]>,
}

fn azimuth<T: Real>(p: &[T; 3]) -> T {
    p[1].atan2(p[0])
}

fn inclination<T: Real>(p: &[T; 3]) -> T {
    p[2].atan2(p[0].hypot(p[1]))
}

impl<T: Real> RangeViewIndex<T> {
    pub fn azimuth_bins(&self) -> usize {
        self.azimuth_bins
    }

    pub fn inclination_bins(&self) -> usize {
        self.inclination_bins
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn occupied_bins(&self) -> usize {
        self.cells.iter().filter(|c| !c.is_empty()).count()
    }

    fn az_step(&self) -> T {
        T::TAU() / T::from_usize_lossy(self.azimuth_bins)
    }

    /// `(azimuth bin, inclination bin)` of a direction, clamped into range.
    pub fn bin_of(&self, p: &[T; 3]) -> (usize, usize) {
        let a = ((azimuth(p) + T::PI()) / self.az_step()).floor();
        let i = ((inclination(p) - self.min_incl) / self.incl_step).floor();
        let clamp = |v: T, n: usize| v.max(T::zero()).to_usize().unwrap_or(0).min(n - 1);
        (clamp(a, self.azimuth_bins), clamp(i, self.inclination_bins))
    }

    fn cell(&self, a: usize, i: usize) -> &[u32] {
        &self.cells[i * self.azimuth_bins + a]
    }

    /// Indices of the `k` nearest points, sorted by distance then index.
    ///
    /// The search window grows around the query's bin until the k-th best
    /// distance is strictly below a lower bound on the distance of every
    /// point outside the window, so the result equals exhaustive KNN.
    pub fn knn(&self, q: &[T; 3], k: usize) -> Vec<usize> {
        if k == 0 || self.positions.is_empty() {
            return Vec::new();
        }
        let (na, ni) = (self.azimuth_bins, self.inclination_bins);
        let (qa, qi) = self.bin_of(q);
        let phi = azimuth(q);
        let theta = inclination(q);
        let rho = q[0].hypot(q[1]);
        let norm = (rho * rho + q[2] * q[2]).sqrt();
        let half_pi = T::FRAC_PI_2();
        let mut w = 0usize;
        loop {
            let full_a = 2 * w + 1 >= na;
            let lo_i = qi.saturating_sub(w);
            let hi_i = (qi + w).min(ni - 1);
            let full_i = lo_i == 0 && hi_i == ni - 1;
            let mut best: Vec<(T, usize)> = Vec::new();
            let az_range: Vec<usize> = if full_a {
                (0..na).collect()
            } else {
                (0..=2 * w).map(|d| (qa + na - w + d) % na).collect()
            };
            for i in lo_i..=hi_i {
                for &a in &az_range {
                    for &p in self.cell(a, i) {
                        let p = p as usize;
                        best.push((sq_dist(&self.positions[p], q).sqrt(), p));
                    }
                }
            }
            best.sort_by(by_dist_then);
            best.truncate(k);
            if full_a && full_i {
                return best.into_iter().map(|(_, i)| i).collect();
            }
            if best.len() == k {
                let lb_a = if full_a {
                    T::infinity()
                } else {
                    let lower = -T::PI() + T::from_usize_lossy(qa) * self.az_step() - T::from_usize_lossy(w) * self.az_step();
                    let upper = -T::PI() + T::from_usize_lossy(qa + w + 1) * self.az_step();
                    let a = (phi - lower).min(upper - phi).max(T::zero());
                    rho * a.min(half_pi).sin()
                };
                let lb_i = if full_i {
                    T::infinity()
                } else {
                    let mut b = T::infinity();
                    if lo_i > 0 {
                        b = b.min(theta - (self.min_incl + T::from_usize_lossy(lo_i) * self.incl_step));
                    }
                    if hi_i < ni - 1 {
                        b = b.min(self.min_incl + T::from_usize_lossy(hi_i + 1) * self.incl_step - theta);
                    }
                    norm * b.max(T::zero()).min(half_pi).sin()
                };
                // Slack covers rounding between bin assignment and edge angles.
                let bound = lb_a.min(lb_i) * (T::one() - T::lit(1e-9));
                if best[k - 1].0 < bound {
                    return best.into_iter().map(|(_, i)| i).collect();
                }
            }
            w = if w == 0 { 1 } else { 2 * w };
        }
    }
}

/// Bins every point by `(atan2(y, x), atan2(z, ρ))`. Inclination bins span
/// the observed range.
pub fn build_range_index<T: Real>(
    points: &[Point8D<T>],
    azimuth_bins: usize,
    inclination_bins: usize,
) -> Result<RangeViewIndex<T>> {
    if azimuth_bins < 1 || inclination_bins < 1 {
        return Err(Error::invalid("range view bins", "must be at least 1"));
    }
    let positions: Vec<[T; 3]> = points.iter().map(Point8D::position).collect();
    let (mut lo, mut hi) = (T::infinity(), T::neg_infinity());
    for p in &positions {
        let t = inclination(p);
        lo = lo.min(t);
        hi = hi.max(t);
    }
    if positions.is_empty() {
        lo = T::zero();
        hi = T::zero();
    }
    let span = (hi - lo).max(T::lit(1e-6));
    let mut index = RangeViewIndex {
        azimuth_bins,
        inclination_bins,
        min_incl: lo,
        incl_step: span / T::from_usize_lossy(inclination_bins),
        cells: vec![Vec::new(); azimuth_bins * inclination_bins],
        positions,
    };
    for (j, p) in index.positions.iter().enumerate() {
        let (a, i) = index.bin_of(p);
        index.cells[i * azimuth_bins + a].push(j as u32);
    }
    Ok(index)
}

/// The `k` nearest fused points to `center`, each embedded from its 8-D
/// feature by `embed`; padded with masked slots.
pub fn gather_point_tokens<T: Real>(
    center: &[T; 3],
    index: &RangeViewIndex<T>,
    points: &[Point8D<T>],
    k: usize,
    embed: &Linear<T>,
) -> Result<TokenBank<T>> {
    if index.len() != points.len() {
        return Err(Error::shape("range index size", index.len(), points.len()));
    }
    if embed.in_dim != 8 {
        return Err(Error::shape("point embedding input", 8, embed.in_dim));
    }
    let tokens: Vec<Token<T>> = index
        .knn(center, k)
        .into_iter()
        .map(|i| Token {
            position: points[i].position(),
            feature: embed.forward(&points[i].features()),
        })
        .collect();
    TokenBank::from_tokens(&tokens, embed.out_dim, k)
}
