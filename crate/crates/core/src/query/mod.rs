//! Query seeding: heatmap peaks, score-modulated FPS, vote lifting, dense
//! refinement and query-token formation.

pub mod refine;
pub mod seeds;

pub use refine::{bilinear_sample, densify_refine, densify_refine_region, RefineWeights};
pub use seeds::{heatmap_nms, score_modulated_fps, FpsConfig, FpsMode};

use crate::backbone::BEVHeatmap;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::weights::{join, ParamSet};
use crate::Real;

/// Default anchor height for lifted seeds, meters.
pub const DEFAULT_ANCHOR_Z: f64 = -1.0;

/// A heatmap peak: cell, score and the BEV feature at that cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate<T> {
    pub cell: (usize, usize),
    pub score: T,
    pub feature: Vec<T>,
}

impl<T: Real> Candidate<T> {
    pub fn at(heat: &BEVHeatmap<T>, u: usize, v: usize) -> Self {
        Self {
            cell: (u, v),
            score: heat.score_at(u, v),
            feature: heat.feature(u, v).to_vec(),
        }
    }
}

/// A seed lifted to 3D by the vote head.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtoCenter<T> {
    pub cell: (usize, usize),
    pub anchor: [T; 3],
    pub offset: [T; 3],
    pub lifted: [T; 3],
    pub query: Vec<T>,
}

/// `lifted = anchor + Δ`, anchor at the seed cell center and height `z_a`,
/// `Δ` the vote head applied to the seed's feature.
pub fn lift<T: Real>(seeds: &[Candidate<T>], z_a: T, vote: &Linear<T>, heat: &BEVHeatmap<T>) -> Result<Vec<ProtoCenter<T>>> {
    if vote.out_dim != 3 {
        return Err(Error::shape("vote head output", 3, vote.out_dim));
    }
    seeds
        .iter()
        .map(|s| {
            let (u, v) = s.cell;
            if u >= heat.width || v >= heat.height {
                return Err(Error::invalid("seeds", format!("cell {:?} outside the heatmap", s.cell)));
            }
            vote.check_input(&s.feature, "vote head input")?;
            let [x, y] = heat.cell_center(u, v);
            let d = vote.forward(&s.feature);
            let anchor = [x, y, z_a];
            let offset = [d[0], d[1], d[2]];
            Ok(ProtoCenter {
                cell: s.cell,
                anchor,
                offset,
                lifted: [anchor[0] + offset[0], anchor[1] + offset[1], anchor[2] + offset[2]],
                query: Vec::new(),
            })
        })
        .collect()
}

/// `reduce([sampled; seed_feature])`.
pub fn form_query<T: Real>(sampled: &[T], seed_feature: &[T], reduce: &Linear<T>) -> Result<Vec<T>> {
    let cat: Vec<T> = sampled.iter().chain(seed_feature).copied().collect();
    reduce.check_input(&cat, "query reduce input")?;
    Ok(reduce.forward(&cat))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryWeights<T> {
    pub vote: Linear<T>,
    pub refine: RefineWeights<T>,
    pub reduce: Linear<T>,
}

impl<T: Real> QueryWeights<T> {
    pub fn zeros(channels: usize, mid: usize, d_model: usize) -> Self {
        Self {
            vote: Linear::zeros(channels, 3),
            refine: RefineWeights::zeros(channels, mid),
            reduce: Linear::zeros(2 * channels, d_model),
        }
    }

    pub fn init(channels: usize, mid: usize, d_model: usize, seed: u64) -> Self {
        use crate::rng::derive_seed;
        Self {
            vote: Linear::init(channels, 3, derive_seed(seed, 1)),
            refine: RefineWeights::init(channels, mid, derive_seed(seed, 2)),
            reduce: Linear::init(2 * channels, d_model, derive_seed(seed, 3)),
        }
    }
}

impl<T: Real> ParamSet<T> for QueryWeights<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.vote.visit(&join(prefix, "vote"), f);
        self.refine.visit(&join(prefix, "refine"), f);
        self.reduce.visit(&join(prefix, "reduce"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.vote.visit_mut(&join(prefix, "vote"), f);
        self.refine.visit_mut(&join(prefix, "refine"), f);
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
    }
}

/// Seeds lifted, refined-map features sampled at the lifted positions, and
/// query tokens formed. Refinement only runs where samples are read.
pub fn init_queries<T: Real>(
    heat: &BEVHeatmap<T>,
    seeds: &[Candidate<T>],
    z_a: T,
    weights: &QueryWeights<T>,
) -> Result<Vec<ProtoCenter<T>>> {
    let mut protos = lift(seeds, z_a, &weights.vote, heat)?;
    let mut needed = vec![false; heat.n_cells()];
    for p in &protos {
        for ((u, v), _) in refine::bilinear_taps(heat, p.lifted[0], p.lifted[1]) {
            needed[heat.cell_index(u, v)] = true;
        }
    }
    let refined = densify_refine_region(heat, &weights.refine, &needed)?;
    for (p, s) in protos.iter_mut().zip(seeds) {
        let sampled = bilinear_sample(&refined, p.lifted[0], p.lifted[1]);
        p.query = form_query(&sampled, &s.feature, &weights.reduce)?;
    }
    Ok(protos)
}
