//! Dense bird's-eye-view maps: z-collapse of sparse features, 1×1 heads and
//! the late / gated fusion variants.

use super::sparse::{ConvParams, SparseTensor3D};
use crate::error::{Error, Result};
use crate::scalar::sigmoid;
use crate::Real;

/// Dense `height × width × channels` grid with a per-cell score.
///
/// Cell `(u, v)` covers `x ∈ origin.x + [u, u+1)·cell_size` and
/// `y ∈ origin.y + [v, v+1)·cell_size`. Storage is row-major in `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct BEVHeatmap<T> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<T>,
    pub score: Vec<T>,
    pub occupied: Vec<bool>,
    pub cell_size: T,
    pub origin: [T; 2],
}

impl<T: Real> BEVHeatmap<T> {
    pub fn zeros(width: usize, height: usize, channels: usize, cell_size: T, origin: [T; 2]) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![T::zero(); width * height * channels],
            score: vec![T::zero(); width * height],
            occupied: vec![false; width * height],
            cell_size,
            origin,
        }
    }

    #[inline]
    pub fn cell_index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    pub fn feature(&self, u: usize, v: usize) -> &[T] {
        let i = self.cell_index(u, v) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn feature_mut(&mut self, u: usize, v: usize) -> &mut [T] {
        let i = self.cell_index(u, v) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn score_at(&self, u: usize, v: usize) -> T {
        self.score[self.cell_index(u, v)]
    }

    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }

    /// Metric center of a cell.
    pub fn cell_center(&self, u: usize, v: usize) -> [T; 2] {
        let half = T::lit(0.5);
        [
            self.origin[0] + (T::from_usize_lossy(u) + half) * self.cell_size,
            self.origin[1] + (T::from_usize_lossy(v) + half) * self.cell_size,
        ]
    }

    /// Continuous cell coordinates with cell centers at integers.
    pub fn to_cell_coords(&self, x: T, y: T) -> [T; 2] {
        let half = T::lit(0.5);
        [
            (x - self.origin[0]) / self.cell_size - half,
            (y - self.origin[1]) / self.cell_size - half,
        ]
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.channels == other.channels
            && self.cell_size == other.cell_size
            && self.origin == other.origin
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_cells();
        if self.data.len() != n * self.channels || self.score.len() != n || self.occupied.len() != n {
            return Err(Error::shape("BEVHeatmap", n * self.channels, self.data.len()));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("heat.data", "non-finite value"));
        }
        if self.score.iter().any(|s| !(*s >= T::zero() && *s <= T::one())) {
            return Err(Error::invalid("heat.score", "outside [0, 1]"));
        }
        Ok(())
    }
}

/// Max over `z` per `(x, y)` column. Sites outside the grid are skipped.
/// Returns the map (no score yet) and, per cell and channel, the input row
/// that won the max.
pub fn bev_collapse<T: Real>(
    x: &SparseTensor3D<T>,
    width: usize,
    height: usize,
    cell_size: T,
    origin: [T; 2],
) -> (BEVHeatmap<T>, Vec<Option<u32>>) {
    let c = x.channels();
    let mut heat = BEVHeatmap::zeros(width, height, c, cell_size, origin);
    let mut argmax = vec![None; width * height * c];
    for (row, coord) in x.coords().iter().enumerate() {
        let (Ok(u), Ok(v)) = (usize::try_from(coord[0]), usize::try_from(coord[1])) else {
            continue;
        };
        if u >= width || v >= height {
            continue;
        }
        let cell = heat.cell_index(u, v);
        let fresh = !heat.occupied[cell];
        heat.occupied[cell] = true;
        let f = x.feature(row);
        for k in 0..c {
            let slot = cell * c + k;
            if fresh || f[k] > heat.data[slot] {
                heat.data[slot] = f[k];
                argmax[slot] = Some(row as u32);
            }
        }
    }
    (heat, argmax)
}

fn check_1x1<T: Real>(params: &ConvParams<T>, in_ch: usize) -> Result<()> {
    params.validate()?;
    if params.taps != 1 {
        return Err(Error::shape("1x1 conv taps", 1, params.taps));
    }
    if params.in_ch != in_ch {
        return Err(Error::shape("1x1 conv input channels", params.in_ch, in_ch));
    }
    Ok(())
}

/// Per-cell linear map on occupied cells, optional ReLU. Empty cells stay 0.
pub fn conv1x1_occupied<T: Real>(heat: &BEVHeatmap<T>, params: &ConvParams<T>, relu: bool) -> Result<BEVHeatmap<T>> {
    check_1x1(params, heat.channels)?;
    let mut out = BEVHeatmap::zeros(heat.width, heat.height, params.out_ch, heat.cell_size, heat.origin);
    out.occupied.clone_from(&heat.occupied);
    out.score.clone_from(&heat.score);
    for cell in 0..heat.n_cells() {
        if !heat.occupied[cell] {
            continue;
        }
        let dst = &mut out.data[cell * params.out_ch..(cell + 1) * params.out_ch];
        dst.copy_from_slice(&params.bias);
        params.accumulate(0, &heat.data[cell * heat.channels..(cell + 1) * heat.channels], dst);
        if relu {
            dst.iter_mut().for_each(|v| *v = v.max(T::zero()));
        }
    }
    Ok(out)
}

/// One-channel sigmoid head; writes `score` on occupied cells, 0 elsewhere.
pub fn apply_score_head<T: Real>(heat: &mut BEVHeatmap<T>, params: &ConvParams<T>) -> Result<()> {
    check_1x1(params, heat.channels)?;
    if params.out_ch != 1 {
        return Err(Error::shape("score head output channels", 1, params.out_ch));
    }
    let c = heat.channels;
    for cell in 0..heat.n_cells() {
        heat.score[cell] = if heat.occupied[cell] {
            let mut z = [params.bias[0]];
            params.accumulate(0, &heat.data[cell * c..(cell + 1) * c], &mut z);
            sigmoid(z[0])
        } else {
            T::zero()
        };
    }
    Ok(())
}

fn check_pair<T: Real>(real: &BEVHeatmap<T>, virt: &BEVHeatmap<T>) -> Result<()> {
    if !real.same_grid(virt) {
        return Err(Error::shape(
            "BEV fusion",
            format!("{}x{}x{}", real.height, real.width, real.channels),
            format!("{}x{}x{}", virt.height, virt.width, virt.channels),
        ));
    }
    Ok(())
}

fn fused_shell<T: Real>(real: &BEVHeatmap<T>, virt: &BEVHeatmap<T>, channels: usize) -> BEVHeatmap<T> {
    let mut out = BEVHeatmap::zeros(real.width, real.height, channels, real.cell_size, real.origin);
    for (o, (a, b)) in out.occupied.iter_mut().zip(real.occupied.iter().zip(&virt.occupied)) {
        *o = *a || *b;
    }
    out
}

/// Channel-concatenates `[real; virt]` and applies a 1×1 conv at every cell.
/// Occupancy is the union; scores are left at 0 for the score head.
pub fn late_fuse_1x1<T: Real>(
    real: &BEVHeatmap<T>,
    virt: &BEVHeatmap<T>,
    params: &ConvParams<T>,
) -> Result<BEVHeatmap<T>> {
    check_pair(real, virt)?;
    check_1x1(params, 2 * real.channels)?;
    let c = real.channels;
    let mut out = fused_shell(real, virt, params.out_ch);
    let mut cat = vec![T::zero(); 2 * c];
    for cell in 0..real.n_cells() {
        cat[..c].copy_from_slice(&real.data[cell * c..(cell + 1) * c]);
        cat[c..].copy_from_slice(&virt.data[cell * c..(cell + 1) * c]);
        let dst = &mut out.data[cell * params.out_ch..(cell + 1) * params.out_ch];
        dst.copy_from_slice(&params.bias);
        params.accumulate(0, &cat, dst);
    }
    Ok(out)
}

/// `g = σ(W·[real; virt] + b)` per cell and channel;
/// output `g ⊙ real + (1 − g) ⊙ virt`.
pub fn gated_fuse<T: Real>(
    real: &BEVHeatmap<T>,
    virt: &BEVHeatmap<T>,
    gate: &ConvParams<T>,
) -> Result<BEVHeatmap<T>> {
    check_pair(real, virt)?;
    check_1x1(gate, 2 * real.channels)?;
    let c = real.channels;
    if gate.out_ch != c {
        return Err(Error::shape("gate output channels", c, gate.out_ch));
    }
    let mut out = fused_shell(real, virt, c);
    let mut cat = vec![T::zero(); 2 * c];
    let mut g = vec![T::zero(); c];
    for cell in 0..real.n_cells() {
        let (r, v) = (&real.data[cell * c..(cell + 1) * c], &virt.data[cell * c..(cell + 1) * c]);
        cat[..c].copy_from_slice(r);
        cat[c..].copy_from_slice(v);
        g.copy_from_slice(&gate.bias);
        gate.accumulate(0, &cat, &mut g);
        for k in 0..c {
            let s = sigmoid(g[k]);
            out.data[cell * c + k] = s * r[k] + (T::one() - s) * v[k];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_map(w: usize, h: usize, c: usize, seed: u64) -> BEVHeatmap<f64> {
        let mut rng = rng::seeded(seed);
        let mut m = BEVHeatmap::zeros(w, h, c, 0.4, [0.0, -2.0]);
        m.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        m.occupied.iter_mut().for_each(|o| *o = rng.gen_bool(0.5));
        m
    }

    #[test]
    fn collapse_takes_column_max() {
        let x = SparseTensor3D::new(
            vec![[1, 0, 0], [1, 0, 3], [0, 1, 2], [9, 9, 9]],
            vec![1.0, -5.0, 2.0, 3.0, 7.0, 7.0, 1.0, 1.0],
            2,
            8,
        )
        .unwrap();
        let (heat, arg) = bev_collapse(&x, 2, 2, 0.4, [0.0, 0.0]);
        assert_eq!(heat.feature(1, 0), &[2.0, 3.0]);
        assert_eq!(heat.feature(0, 1), &[7.0, 7.0]);
        assert_eq!(heat.feature(0, 0), &[0.0, 0.0]);
        assert!(!heat.occupied[heat.cell_index(0, 0)]);
        assert_eq!(arg[heat.cell_index(1, 0) * 2], Some(1));
        assert_eq!(arg[heat.cell_index(1, 0) * 2 + 1], Some(1));
    }

    #[test]
    fn late_fuse_identity_block_and_bias() {
        let (r, v) = (random_map(4, 3, 2, 1), random_map(4, 3, 2, 2));
        let mut p = ConvParams::zeros(1, 4, 2);
        *p.w_mut(0, 0, 0) = 1.0;
        *p.w_mut(0, 1, 1) = 1.0;
        assert_eq!(late_fuse_1x1(&r, &v, &p).unwrap().data, r.data);

        let z = BEVHeatmap::zeros(4, 3, 2, 0.4, [0.0, -2.0]);
        p.bias = vec![0.25, -1.0];
        let out = late_fuse_1x1(&z, &z, &p).unwrap();
        assert!(out.data.chunks(2).all(|c| c == [0.25, -1.0]));
    }

    #[test]
    fn late_fuse_matches_matvec() {
        let (r, v) = (random_map(3, 3, 3, 4), random_map(3, 3, 3, 5));
        let p = ConvParams::init_uniform(1, 6, 2, 6);
        let out = late_fuse_1x1(&r, &v, &p).unwrap();
        for cell in 0..9 {
            let cat: Vec<f64> = r.data[cell * 3..cell * 3 + 3]
                .iter()
                .chain(&v.data[cell * 3..cell * 3 + 3])
                .copied()
                .collect();
            for o in 0..2 {
                let want = p.bias[o] + (0..6).map(|i| p.w(0, i, o) * cat[i]).sum::<f64>();
                assert!((out.data[cell * 2 + o] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gated_fuse_saturation_and_midpoint() {
        let (r, v) = (random_map(5, 2, 2, 7), random_map(5, 2, 2, 8));
        let mut g = ConvParams::zeros(1, 4, 2);
        let mid = gated_fuse(&r, &v, &g).unwrap();
        for i in 0..r.data.len() {
            assert!((mid.data[i] - 0.5 * (r.data[i] + v.data[i])).abs() < 1e-15);
        }
        g.bias = vec![1e3; 2];
        assert_eq!(gated_fuse(&r, &v, &g).unwrap().data, r.data);
    }

    #[test]
    fn gated_fuse_matches_formula() {
        let (r, v) = (random_map(3, 4, 3, 9), random_map(3, 4, 3, 10));
        let g = ConvParams::init_uniform(1, 6, 3, 11);
        let out = gated_fuse(&r, &v, &g).unwrap();
        for cell in 0..12 {
            for k in 0..3 {
                let mut z = g.bias[k];
                for i in 0..3 {
                    z += g.w(0, i, k) * r.data[cell * 3 + i] + g.w(0, 3 + i, k) * v.data[cell * 3 + i];
                }
                let s = 1.0 / (1.0 + (-z).exp());
                let want = s * r.data[cell * 3 + k] + (1.0 - s) * v.data[cell * 3 + k];
                assert!((out.data[cell * 3 + k] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fusion_rejects_mismatched_grids() {
        let (r, v) = (random_map(3, 4, 2, 1), random_map(4, 3, 2, 1));
        assert!(late_fuse_1x1(&r, &v, &ConvParams::zeros(1, 4, 2)).is_err());
        assert!(gated_fuse(&r, &v, &ConvParams::zeros(1, 4, 2)).is_err());
    }
}
