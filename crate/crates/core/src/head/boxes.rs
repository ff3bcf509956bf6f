//! Oriented 3D boxes and their regression encoding.

use crate::error::{Error, Result};
use crate::scalar::wrap_angle;
use crate::Real;

/// Center, extents and heading. `w` is the extent along the heading
/// direction (local x), `l` across it (local y), `h` vertical.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box7<T> {
    pub x: T,
    pub y: T,
    pub z: T,
    pub w: T,
    pub l: T,
    pub h: T,
    pub theta: T,
}

impl<T: Real> Box7<T> {
    /// Builds a box, wrapping `theta` into `[−π, π)`.
    pub fn new(center: [T; 3], dims: [T; 3], theta: T) -> Result<Self> {
        let b = Self {
            x: center[0],
            y: center[1],
            z: center[2],
            w: dims[0],
            l: dims[1],
            h: dims[2],
            theta: wrap_angle(theta),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w > T::zero() && self.l > T::zero() && self.h > T::zero()) {
            return Err(Error::invalid("box", "extents must be positive"));
        }
        if !self.to_array().iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("box", "non-finite field"));
        }
        Ok(())
    }

    pub fn center(&self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dims(&self) -> [T; 3] {
        [self.w, self.l, self.h]
    }

    pub fn to_array(&self) -> [T; 7] {
        [self.x, self.y, self.z, self.w, self.l, self.h, self.theta]
    }

    pub fn from_array(a: [T; 7]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            z: a[2],
            w: a[3],
            l: a[4],
            h: a[5],
            theta: a[6],
        }
    }

    pub fn volume(&self) -> T {
        self.w * self.l * self.h
    }

    /// The four footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[T; 2]; 4] {
        let (s, c) = self.theta.sin_cos();
        let half = T::lit(0.5);
        [(1, 1), (-1, 1), (-1, -1), (1, -1)].map(|(sx, sy)| {
            let dx = T::lit(sx as f64) * half * self.w;
            let dy = T::lit(sy as f64) * half * self.l;
            [self.x + c * dx - s * dy, self.y + s * dx + c * dy]
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxEncoding<T> {
    pub center: [T; 3],
    pub log_dims: [T; 3],
    /// `(sin θ, cos θ)`.
    pub yaw: [T; 2],
}

impl<T: Real> BoxEncoding<T> {
    pub fn to_array(&self) -> [T; 8] {
        let (c, d, y) = (self.center, self.log_dims, self.yaw);
        [c[0], c[1], c[2], d[0], d[1], d[2], y[0], y[1]]
    }

    pub fn from_array(a: [T; 8]) -> Self {
        Self {
            center: [a[0], a[1], a[2]],
            log_dims: [a[3], a[4], a[5]],
            yaw: [a[6], a[7]],
        }
    }
}

pub fn encode_box<T: Real>(b: &Box7<T>) -> BoxEncoding<T> {
    let (s, c) = b.theta.sin_cos();
    BoxEncoding {
        center: b.center(),
        log_dims: b.dims().map(|v| v.ln()),
        yaw: [s, c],
    }
}

/// Inverse of [`encode_box`]; the yaw pair need not be unit length.
pub fn decode_box<T: Real>(e: &BoxEncoding<T>) -> Result<Box7<T>> {
    let [s, c] = e.yaw;
    if s == T::zero() && c == T::zero() {
        return Err(Error::invalid("yaw", "(sin, cos) pair is (0, 0)"));
    }
    let n = s.hypot(c);
    let theta = wrap_angle((s / n).atan2(c / n));
    let [w, l, h] = e.log_dims.map(|v| v.exp());
    Ok(Box7 {
        x: e.center[0],
        y: e.center[1],
        z: e.center[2],
        w,
        l,
        h,
        theta,
    })
}

/// Sign pattern of corner `i`: bit 2 → x, bit 1 → y, bit 0 → z.
pub fn corner_signs(i: usize) -> [i8; 3] {
    let s = |bit: usize| if i >> bit & 1 == 1 { 1 } else { -1 };
    [s(2), s(1), s(0)]
}

/// The eight corners; xy offsets are rotated by θ about z.
pub fn box_corners<T: Real>(b: &Box7<T>) -> [[T; 3]; 8] {
    let (s, c) = b.theta.sin_cos();
    let half = T::lit(0.5);
    std::array::from_fn(|i| {
        let [sx, sy, sz] = corner_signs(i).map(|v| T::lit(v as f64) * half);
        let (dx, dy) = (sx * b.w, sy * b.l);
        [b.x + c * dx - s * dy, b.y + s * dx + c * dy, b.z + sz * b.h]
    })
}
