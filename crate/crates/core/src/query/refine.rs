//! Dense 3×3 refinement of the BEV map and bilinear feature sampling.

use crate::backbone::{BEVHeatmap, ConvParams};
use crate::error::{Error, Result};
use crate::weights::{join, ParamSet};
use crate::Real;

/// 3×3 conv followed by a folded normalization `scale ⊙ y + shift` and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineLayer<T> {
    pub conv: ConvParams<T>,
    pub scale: Vec<T>,
    pub shift: Vec<T>,
}

impl<T: Real> RefineLayer<T> {
    fn with_conv(conv: ConvParams<T>) -> Self {
        let c = conv.out_ch;
        Self {
            conv,
            scale: vec![T::one(); c],
            shift: vec![T::zero(); c],
        }
    }
}

/// Four layers, `c → m → m → m → c`, plus a skip add.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineWeights<T> {
    pub layers: [RefineLayer<T>; 4],
}

impl<T: Real> RefineWeights<T> {
    fn widths(c: usize, m: usize) -> [(usize, usize); 4] {
        [(c, m), (m, m), (m, m), (m, c)]
    }

    pub fn zeros(channels: usize, mid: usize) -> Self {
        Self {
            layers: Self::widths(channels, mid).map(|(i, o)| RefineLayer::with_conv(ConvParams::zeros(9, i, o))),
        }
    }

    pub fn init(channels: usize, mid: usize, seed: u64) -> Self {
        let mut l = 0;
        Self {
            layers: Self::widths(channels, mid).map(|(i, o)| {
                l += 1;
                RefineLayer::with_conv(ConvParams::init_uniform(9, i, o, crate::rng::derive_seed(seed, l)))
            }),
        }
    }

    pub fn channels(&self) -> usize {
        self.layers[0].conv.in_ch
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (k, l) in self.layers.iter().enumerate() {
            l.conv.validate()?;
            if l.conv.taps != 9 || l.scale.len() != l.conv.out_ch || l.shift.len() != l.conv.out_ch {
                return Err(Error::shape("refine layer", "3x3 kernel with per-channel scale/shift", format!("layer {k}")));
            }
            if k > 0 && l.conv.in_ch != self.layers[k - 1].conv.out_ch {
                return Err(Error::shape("refine chain", self.layers[k - 1].conv.out_ch, l.conv.in_ch));
            }
        }
        if self.layers[3].conv.out_ch != c {
            return Err(Error::shape("refine output channels", c, self.layers[3].conv.out_ch));
        }
        Ok(())
    }
}

impl<T: Real> ParamSet<T> for RefineWeights<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        for (k, l) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("layer{k}"));
            l.conv.visit(&p, f);
            f(&join(&p, "scale"), &[l.scale.len()], &l.scale);
            f(&join(&p, "shift"), &[l.shift.len()], &l.shift);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        for (k, l) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &format!("layer{k}"));
            l.conv.visit_mut(&p, f);
            let n = l.scale.len();
            f(&join(&p, "scale"), &[n], &mut l.scale);
            f(&join(&p, "shift"), &[n], &mut l.shift);
        }
    }
}

/// Tap of a 2D 3×3 offset in `{-1, 0, 1}²`.
#[inline]
pub fn tap2(du: i64, dv: i64) -> usize {
    ((du + 1) * 3 + (dv + 1)) as usize
}

fn dilate(mask: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for v in 0..h {
        for u in 0..w {
            if !mask[v * w + u] {
                continue;
            }
            for vv in v.saturating_sub(1)..=(v + 1).min(h - 1) {
                for uu in u.saturating_sub(1)..=(u + 1).min(w - 1) {
                    out[vv * w + uu] = true;
                }
            }
        }
    }
    out
}

fn conv_layer<T: Real>(x: &[T], w: usize, h: usize, layer: &RefineLayer<T>, mask: &[bool]) -> Vec<T> {
    let (ci, co) = (layer.conv.in_ch, layer.conv.out_ch);
    let mut out = vec![T::zero(); w * h * co];
    let mut acc = vec![T::zero(); co];
    for v in 0..h {
        for u in 0..w {
            let cell = v * w + u;
            if !mask[cell] {
                continue;
            }
            acc.copy_from_slice(&layer.conv.bias);
            for dv in -1i64..=1 {
                for du in -1i64..=1 {
                    let (uu, vv) = (u as i64 + du, v as i64 + dv);
                    if uu < 0 || vv < 0 || uu >= w as i64 || vv >= h as i64 {
                        continue;
                    }
                    let src = (vv as usize * w + uu as usize) * ci;
                    layer.conv.accumulate(tap2(du, dv), &x[src..src + ci], &mut acc);
                }
            }
            for k in 0..co {
                out[cell * co + k] = (layer.scale[k] * acc[k] + layer.shift[k]).max(T::zero());
            }
        }
    }
    out
}

/// Refinement restricted to the cells in `needed`: outputs there equal the
/// full dense result; other cells pass the input through unchanged.
pub fn densify_refine_region<T: Real>(
    heat: &BEVHeatmap<T>,
    weights: &RefineWeights<T>,
    needed: &[bool],
) -> Result<BEVHeatmap<T>> {
    weights.validate()?;
    if heat.channels != weights.channels() {
        return Err(Error::shape("densify_refine channels", weights.channels(), heat.channels));
    }
    if needed.len() != heat.n_cells() {
        return Err(Error::shape("densify_refine mask", heat.n_cells(), needed.len()));
    }
    let (w, h) = (heat.width, heat.height);
    let mut masks = vec![needed.to_vec()];
    for _ in 0..3 {
        let next = dilate(masks.last().unwrap(), w, h);
        masks.push(next);
    }
    masks.reverse();
    let mut x = heat.data.clone();
    for (layer, mask) in weights.layers.iter().zip(&masks) {
        x = conv_layer(&x, w, h, layer, mask);
    }
    let mut out = heat.clone();
    let c = heat.channels;
    for cell in 0..heat.n_cells() {
        if needed[cell] {
            for k in 0..c {
                out.data[cell * c + k] += x[cell * c + k];
            }
        }
    }
    Ok(out)
}

/// Dense four-layer refinement with skip add over the whole map.
pub fn densify_refine<T: Real>(heat: &BEVHeatmap<T>, weights: &RefineWeights<T>) -> Result<BEVHeatmap<T>> {
    densify_refine_region(heat, weights, &vec![true; heat.n_cells()])
}

/// The four cells a bilinear lookup at `(x, y)` reads, with weights.
pub fn bilinear_taps<T: Real>(map: &BEVHeatmap<T>, x: T, y: T) -> [((usize, usize), T); 4] {
    let [fx, fy] = map.to_cell_coords(x, y).map(|f| {
        // Cell centers should read exactly one cell despite rounding in the
        // metric-to-cell conversion.
        let r = f.round();
        if (f - r).abs() <= T::epsilon() * T::lit(64.0) * r.abs().max(T::one()) {
            r
        } else {
            f
        }
    });
    let axis = |f: T, n: usize| -> (usize, usize, T) {
        let max = T::from_usize_lossy(n - 1);
        let f = f.max(T::zero()).min(max);
        if n == 1 {
            return (0, 0, T::zero());
        }
        let i0 = f.floor().to_usize().unwrap_or(0).min(n - 2);
        (i0, i0 + 1, f - T::from_usize_lossy(i0))
    };
    let (u0, u1, tu) = axis(fx, map.width);
    let (v0, v1, tv) = axis(fy, map.height);
    let one = T::one();
    [
        ((u0, v0), (one - tu) * (one - tv)),
        ((u1, v0), tu * (one - tv)),
        ((u0, v1), (one - tu) * tv),
        ((u1, v1), tu * tv),
    ]
}

/// Bilinear interpolation in cell coordinates; points off the map clamp to
/// the border cells.
pub fn bilinear_sample<T: Real>(map: &BEVHeatmap<T>, x: T, y: T) -> Vec<T> {
    let mut out = vec![T::zero(); map.channels];
    for ((u, v), wt) in bilinear_taps(map, x, y) {
        if wt == T::zero() {
            continue;
        }
        for (o, f) in out.iter_mut().zip(map.feature(u, v)) {
            *o += wt * *f;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_map(w: usize, h: usize, c: usize, seed: u64) -> BEVHeatmap<f64> {
        let mut rng = rng::seeded(seed);
        let mut m = BEVHeatmap::zeros(w, h, c, 0.4, [1.0, -3.0]);
        m.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        m
    }

    #[test]
    fn zero_weights_are_identity() {
        let m = random_map(6, 5, 4, 1);
        assert_eq!(densify_refine(&m, &RefineWeights::zeros(4, 3)).unwrap(), m);
    }

    #[test]
    fn region_matches_full_dense() {
        let m = random_map(9, 8, 3, 2);
        let w = RefineWeights::init(3, 2, 3);
        let full = densify_refine(&m, &w).unwrap();
        let mut needed = vec![false; 72];
        needed[3 * 9 + 4] = true;
        needed[7 * 9 + 8] = true;
        let part = densify_refine_region(&m, &w, &needed).unwrap();
        for cell in [3 * 9 + 4, 7 * 9 + 8] {
            assert_eq!(&part.data[cell * 3..cell * 3 + 3], &full.data[cell * 3..cell * 3 + 3]);
        }
    }

    #[test]
    fn bilinear_center_and_midpoint() {
        let m = random_map(4, 3, 2, 4);
        let [x, y] = m.cell_center(2, 1);
        assert_eq!(bilinear_sample(&m, x, y), m.feature(2, 1));
        let [x0, y0] = m.cell_center(1, 0);
        let (xm, ym) = (x0 + 0.2, y0 + 0.2);
        let got = bilinear_sample(&m, xm, ym);
        for k in 0..2 {
            let want = (m.feature(1, 0)[k] + m.feature(2, 0)[k] + m.feature(1, 1)[k] + m.feature(2, 1)[k]) / 4.0;
            assert!((got[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_clamps_off_grid() {
        let m = random_map(3, 3, 1, 5);
        assert_eq!(bilinear_sample(&m, -100.0, -100.0), m.feature(0, 0));
        assert_eq!(bilinear_sample(&m, 100.0, 100.0), m.feature(2, 2));
    }
}
