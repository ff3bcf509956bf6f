use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::fusion::{FusedCloud, Point8D};
use crate::rng::splitmix64;
use crate::Real;

pub type VoxelCoord = [i32; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Voxel<T> {
    pub representative: Point8D<T>,
    pub count: usize,
}

/// Occupied voxels keyed by integer coordinate, each holding one
/// representative point.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid<T> {
    pub voxel_size: T,
    pub origin: [T; 3],
    pub voxels: BTreeMap<VoxelCoord, Voxel<T>>,
}

impl<T: Real> VoxelGrid<T> {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn coord_of(&self, p: &[T; 3]) -> Option<VoxelCoord> {
        voxel_coord(p, &self.origin, self.voxel_size)
    }
}

pub(crate) fn voxel_coord<T: Real>(p: &[T; 3], origin: &[T; 3], size: T) -> Option<VoxelCoord> {
    let mut c = [0i32; 3];
    for k in 0..3 {
        c[k] = ((p[k] - origin[k]) / size).floor().to_i32()?;
    }
    Some(c)
}

/// Per-point random priority that depends only on the seed and the point's
/// contents, never on its position in the input.
fn priority<T: Real>(p: &Point8D<T>, seed: u64) -> u64 {
    p.features()
        .iter()
        .fold(splitmix64(seed), |h, v| splitmix64(h ^ v.to_f64_lossy().to_bits()))
}

/// Buckets points into `voxel_size` cells anchored at `origin`. Each voxel's
/// representative is the point with the smallest seeded priority, which is a
/// uniform pick that does not depend on input order.
pub fn voxelize<T: Real>(
    cloud: &FusedCloud<T>,
    voxel_size: T,
    origin: [T; 3],
    seed: u64,
) -> Result<VoxelGrid<T>> {
    if !(voxel_size > T::zero()) {
        return Err(Error::invalid("voxel_size", "must be positive"));
    }
    let mut best: BTreeMap<VoxelCoord, (u64, Voxel<T>)> = BTreeMap::new();
    for p in cloud.points() {
        let Some(coord) = voxel_coord(&p.position(), &origin, voxel_size) else {
            continue;
        };
        let pri = priority(p, seed);
        best.entry(coord)
            .and_modify(|(bp, v)| {
                v.count += 1;
                if pri < *bp {
                    *bp = pri;
                    v.representative = *p;
                }
            })
            .or_insert((
                pri,
                Voxel {
                    representative: *p,
                    count: 1,
                },
            ));
    }
    Ok(VoxelGrid {
        voxel_size,
        origin,
        voxels: best.into_iter().map(|(c, (_, v))| (c, v)).collect(),
    })
}
