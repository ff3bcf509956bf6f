//! The four-stage sparse backbone, its BEV head, and a hand-written
//! backward pass.

use super::bev::{apply_score_head, bev_collapse, conv1x1_occupied, BEVHeatmap};
use super::sparse::{apply_rules, rules_backward, strided_rules, submanifold_rules, ConvParams, Rulebook, SparseTensor3D};
use super::voxel::VoxelGrid;
use crate::error::{Error, Result};
use crate::scalar::sigmoid;
use crate::weights::{join, ParamSet};
use crate::Real;

/// Input width: the 8-D point feature.
pub const POINT_FEATURES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Output widths of stages 1–4.
    pub channels: [usize; 4],
    /// Width of the BEV map after the 1×1 projection.
    pub bev_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64, 128],
            bev_channels: 128,
        }
    }
}

/// Dense BEV canvas the stride-8 features are collapsed onto.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevGeometry<T> {
    pub width: usize,
    pub height: usize,
    pub cell_size: T,
    pub origin: [T; 2],
}

impl<T: Real> BevGeometry<T> {
    /// Canvas covering `[min, max)` in x and y at `voxel_size × 8`.
    pub fn from_range(min: [T; 2], max: [T; 2], voxel_size: T) -> Result<Self> {
        let cell_size = voxel_size * T::lit(8.0);
        let cells = |lo: T, hi: T| ((hi - lo) / cell_size).ceil().to_usize().filter(|n| *n > 0);
        match (cells(min[0], max[0]), cells(min[1], max[1])) {
            (Some(width), Some(height)) => Ok(Self {
                width,
                height,
                cell_size,
                origin: min,
            }),
            _ => Err(Error::invalid("point_cloud_range", "empty BEV extent")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights<T> {
    pub conv1: ConvParams<T>,
    pub conv2: ConvParams<T>,
    pub down2: ConvParams<T>,
    pub conv3: ConvParams<T>,
    pub down3: ConvParams<T>,
    pub conv4: ConvParams<T>,
    pub down4: ConvParams<T>,
    pub bev_proj: ConvParams<T>,
    pub score_head: ConvParams<T>,
}

impl<T: Real> BackboneWeights<T> {
    fn build(cfg: &BackboneConfig, mut make: impl FnMut(usize, usize, usize) -> ConvParams<T>) -> Self {
        let [c1, c2, c3, c4] = cfg.channels;
        Self {
            conv1: make(27, POINT_FEATURES, c1),
            conv2: make(27, c1, c2),
            down2: make(27, c2, c2),
            conv3: make(27, c2, c3),
            down3: make(27, c3, c3),
            conv4: make(27, c3, c4),
            down4: make(27, c4, c4),
            bev_proj: make(1, c4, cfg.bev_channels),
            score_head: make(1, cfg.bev_channels, 1),
        }
    }

    pub fn zeros(cfg: &BackboneConfig) -> Self {
        Self::build(cfg, ConvParams::zeros)
    }

    pub fn init(cfg: &BackboneConfig, seed: u64) -> Self {
        let mut layer = 0u64;
        Self::build(cfg, |t, i, o| {
            layer += 1;
            ConvParams::init_uniform(t, i, o, crate::rng::derive_seed(seed, layer))
        })
    }

    pub fn config(&self) -> BackboneConfig {
        BackboneConfig {
            channels: [self.conv1.out_ch, self.conv2.out_ch, self.conv3.out_ch, self.conv4.out_ch],
            bev_channels: self.bev_proj.out_ch,
        }
    }

    fn sparse_layers(&self) -> [(&ConvParams<T>, bool); 7] {
        [
            (&self.conv1, false),
            (&self.conv2, false),
            (&self.down2, true),
            (&self.conv3, false),
            (&self.down3, true),
            (&self.conv4, false),
            (&self.down4, true),
        ]
    }

    /// Checks every shape against [`Self::config`].
    pub fn validate(&self) -> Result<()> {
        let expect = Self::zeros(&self.config());
        let mut ok = true;
        let mut shapes = Vec::new();
        expect.visit("", &mut |_, s, _| shapes.push(s.to_vec()));
        let mut i = 0;
        self.visit("", &mut |_, s, _| {
            ok &= shapes.get(i).is_some_and(|e| e == s);
            i += 1;
        });
        if !ok || self.conv1.in_ch != POINT_FEATURES {
            return Err(Error::shape("backbone weights", "consistent layer chain", "mismatched widths"));
        }
        for (p, _) in self.sparse_layers() {
            p.validate()?;
        }
        self.bev_proj.validate()?;
        self.score_head.validate()
    }
}

impl<T: Real> ParamSet<T> for BackboneWeights<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        for (name, p) in [
            ("conv1", &self.conv1),
            ("conv2", &self.conv2),
            ("down2", &self.down2),
            ("conv3", &self.conv3),
            ("down3", &self.down3),
            ("conv4", &self.conv4),
            ("down4", &self.down4),
            ("bev_proj", &self.bev_proj),
            ("score_head", &self.score_head),
        ] {
            p.visit(&join(prefix, name), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        for (name, p) in [
            ("conv1", &mut self.conv1),
            ("conv2", &mut self.conv2),
            ("down2", &mut self.down2),
            ("conv3", &mut self.conv3),
            ("down3", &mut self.down3),
            ("conv4", &mut self.conv4),
            ("down4", &mut self.down4),
            ("bev_proj", &mut self.bev_proj),
            ("score_head", &mut self.score_head),
        ] {
            p.visit_mut(&join(prefix, name), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackboneOutput<T> {
    pub x_conv1: SparseTensor3D<T>,
    pub x_conv2: SparseTensor3D<T>,
    pub x_conv3: SparseTensor3D<T>,
    pub x_conv4: SparseTensor3D<T>,
    /// BEV features with scores filled in (or left at 0 by
    /// [`backbone_features`]).
    pub heat: BEVHeatmap<T>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BackboneCache<T> {
    inputs: Vec<SparseTensor3D<T>>,
    books: Vec<Rulebook>,
    outputs: Vec<SparseTensor3D<T>>,
    column: BEVHeatmap<T>,
    argmax: Vec<Option<u32>>,
}

pub fn grid_to_tensor<T: Real>(grid: &VoxelGrid<T>) -> SparseTensor3D<T> {
    let mut coords = Vec::with_capacity(grid.len());
    let mut feats = Vec::with_capacity(grid.len() * POINT_FEATURES);
    for (c, v) in &grid.voxels {
        coords.push(*c);
        feats.extend_from_slice(&v.representative.features());
    }
    SparseTensor3D::new(coords, feats, POINT_FEATURES, 1).expect("grid coords are unique")
}

fn relu<T: Real>(t: SparseTensor3D<T>) -> SparseTensor3D<T> {
    t.map_feats(|v| v.max(T::zero()))
}

/// Runs the sparse stages and the BEV projection, without the score head.
pub fn backbone_features<T: Real>(
    grid: &VoxelGrid<T>,
    weights: &BackboneWeights<T>,
    geom: &BevGeometry<T>,
) -> Result<(BackboneOutput<T>, BackboneCache<T>)> {
    weights.validate()?;
    let mut x = grid_to_tensor(grid);
    let mut inputs = Vec::with_capacity(7);
    let mut books = Vec::with_capacity(7);
    let mut outputs: Vec<SparseTensor3D<T>> = Vec::with_capacity(7);
    for (params, strided) in weights.sparse_layers() {
        let book = if strided {
            strided_rules(&x)
        } else {
            submanifold_rules(&x)
        };
        let y = relu(apply_rules(&x, params, &book));
        if !strided {
            debug_assert_eq!(y.coords(), x.coords());
        }
        inputs.push(std::mem::replace(&mut x, y.clone()));
        books.push(book);
        outputs.push(y);
    }
    let (column, argmax) = bev_collapse(&outputs[6], geom.width, geom.height, geom.cell_size, geom.origin);
    let heat = conv1x1_occupied(&column, &weights.bev_proj, true)?;
    let out = BackboneOutput {
        x_conv1: outputs[0].clone(),
        x_conv2: outputs[2].clone(),
        x_conv3: outputs[4].clone(),
        x_conv4: outputs[6].clone(),
        heat,
    };
    Ok((
        out,
        BackboneCache {
            inputs,
            books,
            outputs,
            column,
            argmax,
        },
    ))
}

/// Full forward pass: sparse stages, BEV collapse, projection and score.
pub fn backbone_forward<T: Real>(
    grid: &VoxelGrid<T>,
    weights: &BackboneWeights<T>,
    geom: &BevGeometry<T>,
) -> Result<BackboneOutput<T>> {
    let (mut out, _) = backbone_features(grid, weights, geom)?;
    apply_score_head(&mut out.heat, &weights.score_head)?;
    Ok(out)
}

/// Backward pass for the readout `Σ g_score·score + Σ g_data·data`, where
/// `data` is the projected BEV map and `score` its sigmoid head.
pub fn backbone_backward<T: Real>(
    cache: &BackboneCache<T>,
    out: &BackboneOutput<T>,
    weights: &BackboneWeights<T>,
    grad_score: &[T],
    grad_data: Option<&[T]>,
) -> BackboneWeights<T> {
    let heat = &out.heat;
    let (c4, cb) = (cache.column.channels, heat.channels);
    let mut grads = BackboneWeights::zeros(&weights.config());

    let mut g_data = grad_data.map_or_else(|| vec![T::zero(); heat.data.len()], <[T]>::to_vec);
    let sh = &weights.score_head;
    for cell in 0..heat.n_cells() {
        if !heat.occupied[cell] || grad_score[cell] == T::zero() {
            continue;
        }
        let f = &heat.data[cell * cb..(cell + 1) * cb];
        let mut z = sh.bias[0];
        sh.accumulate(0, f, std::slice::from_mut(&mut z));
        let s = sigmoid(z);
        let dz = grad_score[cell] * s * (T::one() - s);
        grads.score_head.bias[0] += dz;
        for i in 0..cb {
            grads.score_head.weight[i] += dz * f[i];
            g_data[cell * cb + i] += dz * sh.weight[i];
        }
    }

    let bp = &weights.bev_proj;
    let mut g_col = vec![T::zero(); cache.column.data.len()];
    for cell in 0..heat.n_cells() {
        if !heat.occupied[cell] {
            continue;
        }
        let col = &cache.column.data[cell * c4..(cell + 1) * c4];
        for o in 0..cb {
            if heat.data[cell * cb + o] <= T::zero() {
                continue;
            }
            let g = g_data[cell * cb + o];
            grads.bev_proj.bias[o] += g;
            for i in 0..c4 {
                *grads.bev_proj.w_mut(0, i, o) += g * col[i];
                g_col[cell * c4 + i] += g * bp.w(0, i, o);
            }
        }
    }

    let mut g = vec![T::zero(); cache.outputs[6].feats().len()];
    for (slot, arg) in cache.argmax.iter().enumerate() {
        if let Some(row) = arg {
            g[*row as usize * c4 + slot % c4] += g_col[slot];
        }
    }

    let layers = weights.sparse_layers();
    let mut grad_slots: Vec<&mut ConvParams<T>> = vec![
        &mut grads.conv1,
        &mut grads.conv2,
        &mut grads.down2,
        &mut grads.conv3,
        &mut grads.down3,
        &mut grads.conv4,
        &mut grads.down4,
    ];
    for l in (0..7).rev() {
        for (gv, y) in g.iter_mut().zip(cache.outputs[l].feats()) {
            if *y <= T::zero() {
                *gv = T::zero();
            }
        }
        let (cg, gin) = rules_backward(&cache.inputs[l], layers[l].0, &cache.books[l], &g);
        grad_slots[l].weight = cg.weight;
        grad_slots[l].bias = cg.bias;
        g = gin;
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::voxel::voxelize;
    use crate::fusion::{FusedCloud, Point8D};

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            channels: [3, 4, 4, 5],
            bev_channels: 4,
        }
    }

    fn geom() -> BevGeometry<f64> {
        BevGeometry::from_range([0.0, 0.0], [3.2, 3.2], 0.1).unwrap()
    }

    #[test]
    fn empty_grid_gives_zero_heat() {
        let grid = voxelize(&FusedCloud::<f64>::default(), 0.1, [0.0; 3], 0).unwrap();
        let out = backbone_forward(&grid, &BackboneWeights::init(&small_cfg(), 1), &geom()).unwrap();
        assert!(out.x_conv4.is_empty());
        assert!(out.heat.score.iter().all(|s| *s == 0.0));
        assert!(out.heat.data.iter().all(|s| *s == 0.0));
    }

    #[test]
    fn single_voxel_score_is_sigmoid_of_bias() {
        let cloud = FusedCloud::from_points(vec![Point8D::real(1.0, 1.0, 0.5, 0.2)]);
        let grid = voxelize(&cloud, 0.1, [0.0; 3], 0).unwrap();
        let mut w = BackboneWeights::zeros(&small_cfg());
        w.score_head.bias[0] = 0.7;
        let out = backbone_forward(&grid, &w, &geom()).unwrap();
        let g = geom();
        let u = (1.0 / g.cell_size) as usize;
        let expect = 1.0 / (1.0 + (-0.7f64).exp());
        assert_eq!(out.heat.score_at(u, u), expect);
        assert_eq!(out.heat.occupied.iter().filter(|o| **o).count(), 1);
        assert_eq!(out.heat.cell_size, 0.1 * 8.0);
        assert_eq!(out.x_conv4.stride(), 8);
    }
}
