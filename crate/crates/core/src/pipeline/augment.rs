//! Global scene augmentations applied to points and boxes together.

use rand::Rng;

use super::config::PipelineConfig;
use crate::head::Box7;
use crate::rng;
use crate::scalar::wrap_angle;
use crate::Real;

/// One drawn augmentation: optional flip (y → −y), then rotation about z,
/// then uniform scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams<T> {
    pub flip: bool,
    pub angle: T,
    pub scale: T,
}

impl<T: Real> AugmentParams<T> {
    pub fn identity() -> Self {
        Self {
            flip: false,
            angle: T::zero(),
            scale: T::one(),
        }
    }

    /// Draws from the configured ranges; disabled switches give identity.
    pub fn sample(cfg: &PipelineConfig, seed: u64) -> Self {
        if !cfg.augment {
            return Self::identity();
        }
        let mut r = rng::seeded(seed);
        let flip = r.gen::<bool>() && cfg.aug_flip;
        let max = cfg.aug_rotation_deg.to_radians();
        let angle = if max > 0.0 { r.gen_range(-max..=max) } else { 0.0 };
        let scale = if cfg.aug_scale > 0.0 {
            r.gen_range(1.0 - cfg.aug_scale..=1.0 + cfg.aug_scale)
        } else {
            1.0
        };
        Self {
            flip,
            angle: T::lit(angle),
            scale: T::lit(scale),
        }
    }

    pub fn apply_point(&self, p: [T; 3]) -> [T; 3] {
        let y = if self.flip { -p[1] } else { p[1] };
        let (s, c) = self.angle.sin_cos();
        [
            (c * p[0] - s * y) * self.scale,
            (s * p[0] + c * y) * self.scale,
            p[2] * self.scale,
        ]
    }

    pub fn apply_box(&self, b: &Box7<T>) -> Box7<T> {
        let [x, y, z] = self.apply_point(b.center());
        let theta = if self.flip { -b.theta } else { b.theta };
        Box7 {
            x,
            y,
            z,
            w: b.w * self.scale,
            l: b.l * self.scale,
            h: b.h * self.scale,
            theta: wrap_angle(theta + self.angle),
        }
    }

    pub fn apply_cloud(&self, cloud: &[[T; 4]]) -> Vec<[T; 4]> {
        cloud
            .iter()
            .map(|p| {
                let [x, y, z] = self.apply_point([p[0], p[1], p[2]]);
                [x, y, z, p[3]]
            })
            .collect()
    }

    /// Undoes [`Self::apply_point`] / [`Self::apply_box`].
    pub fn invert_box(&self, b: &Box7<T>) -> Box7<T> {
        let inv_scale = T::one() / self.scale;
        let (s, c) = self.angle.sin_cos();
        let (x, y) = (b.x * inv_scale, b.y * inv_scale);
        let (ux, uy) = (c * x + s * y, -s * x + c * y);
        let theta = b.theta - self.angle;
        Box7 {
            x: ux,
            y: if self.flip { -uy } else { uy },
            z: b.z * inv_scale,
            w: b.w * inv_scale,
            l: b.l * inv_scale,
            h: b.h * inv_scale,
            theta: wrap_angle(if self.flip { -theta } else { theta }),
        }
    }
}
