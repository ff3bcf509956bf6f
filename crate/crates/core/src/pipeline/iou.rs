//! Rotated-box overlaps.

use crate::head::Box7;
use crate::Real;

fn cross<T: Real>(o: [T; 2], a: [T; 2], b: [T; 2]) -> T {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area of a simple polygon (positive when counter-clockwise).
pub fn polygon_area<T: Real>(poly: &[[T; 2]]) -> T {
    let n = poly.len();
    if n < 3 {
        return T::zero();
    }
    let mut a = T::zero();
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        a += p[0] * q[1] - q[0] * p[1];
    }
    a * T::lit(0.5)
}

/// Sutherland–Hodgman clip of `subject` by the convex counter-clockwise
/// polygon `clip`.
pub fn clip_convex<T: Real>(subject: &[[T; 2]], clip: &[[T; 2]]) -> Vec<[T; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (cp, cq) = (cross(a, b, p), cross(a, b, q));
            let (p_in, q_in) = (cp >= T::zero(), cq >= T::zero());
            if p_in {
                out.push(p);
            }
            if p_in != q_in {
                let t = cp / (cp - cq);
                out.push([p[0] + (q[0] - p[0]) * t, p[1] + (q[1] - p[1]) * t]);
            }
        }
    }
    out
}

/// Footprint intersection area.
pub fn bev_intersection<T: Real>(a: &Box7<T>, b: &Box7<T>) -> T {
    polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners())).max(T::zero())
}

fn ratio<T: Real>(inter: T, a: T, b: T) -> T {
    let union = a + b - inter;
    if union > T::zero() {
        (inter / union).max(T::zero()).min(T::one())
    } else {
        T::zero()
    }
}

/// Rotated-rectangle IoU of the footprints.
pub fn bev_iou<T: Real>(a: &Box7<T>, b: &Box7<T>) -> T {
    ratio(bev_intersection(a, b), a.w * a.l, b.w * b.l)
}

/// Footprint intersection times vertical overlap, over the volume union.
pub fn iou_3d<T: Real>(a: &Box7<T>, b: &Box7<T>) -> T {
    let half = T::lit(0.5);
    let top = (a.z + a.h * half).min(b.z + b.h * half);
    let bottom = (a.z - a.h * half).max(b.z - b.h * half);
    let dz = (top - bottom).max(T::zero());
    ratio(bev_intersection(a, b) * dz, a.volume(), b.volume())
}

/// IoU of axis-aligned image boxes `left, top, right, bottom`.
pub fn iou_2d<T: Real>(a: &[T; 4], b: &[T; 4]) -> T {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(T::zero());
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(T::zero());
    let area = |r: &[T; 4]| (r[2] - r[0]).max(T::zero()) * (r[3] - r[1]).max(T::zero());
    ratio(w * h, area(a), area(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64, y: f64, theta: f64) -> Box7<f64> {
        Box7::new([x, y, 0.0], [1.0, 1.0, 1.0], theta).unwrap()
    }

    #[test]
    fn identical_disjoint_and_half() {
        assert!((bev_iou(&bx(0.0, 0.0, 0.3), &bx(0.0, 0.0, 0.3)) - 1.0).abs() < 1e-12);
        assert!((iou_3d(&bx(0.0, 0.0, 0.3), &bx(0.0, 0.0, 0.3)) - 1.0).abs() < 1e-12);
        assert_eq!(bev_iou(&bx(0.0, 0.0, 0.0), &bx(5.0, 0.0, 0.0)), 0.0);
        assert!((bev_iou(&bx(0.0, 0.0, 0.0), &bx(0.5, 0.0, 0.0)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rotated_square_overlap() {
        // Unit square vs. the same square turned 45°: the octagon has area
        // 2(√2 − 1).
        let inter = bev_intersection(&bx(0.0, 0.0, 0.0), &bx(0.0, 0.0, std::f64::consts::FRAC_PI_4));
        assert!((inter - 2.0 * (2f64.sqrt() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn image_boxes() {
        assert!((iou_2d::<f64>(&[0.0, 0.0, 2.0, 2.0], &[1.0, 0.0, 3.0, 2.0]) - 1.0 / 3.0).abs() < 1e-12);
    }
}
