//! Heatmap peak picking and score-modulated farthest-point sampling.

use std::cmp::Ordering;

use rand::seq::index;

use super::Candidate;
use crate::backbone::BEVHeatmap;
use crate::error::{Error, Result};
use crate::{rng, Real};

/// Cells whose score is a strict maximum over the Chebyshev window of
/// radius `min_dist − 1` and at least `score_thresh`. Sorted by descending
/// score, ties in row-major order.
pub fn heatmap_nms<T: Real>(heat: &BEVHeatmap<T>, min_dist: usize, score_thresh: T) -> Result<Vec<Candidate<T>>> {
    if min_dist < 1 {
        return Err(Error::invalid("min_dist", "must be at least 1"));
    }
    let r = min_dist - 1;
    let mut out = Vec::new();
    for v in 0..heat.height {
        for u in 0..heat.width {
            let s = heat.score_at(u, v);
            if !(s >= score_thresh) {
                continue;
            }
            let strict = (v.saturating_sub(r)..=(v + r).min(heat.height - 1)).all(|vv| {
                (u.saturating_sub(r)..=(u + r).min(heat.width - 1))
                    .all(|uu| (uu, vv) == (u, v) || heat.score_at(uu, vv) < s)
            });
            if strict {
                out.push(Candidate::at(heat, u, v));
            }
        }
    }
    // Stable sort keeps row-major order among equal scores.
    out.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    Ok(out)
}

/// Which score the reweighted distance divides by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FpsMode {
    /// `‖c − c′‖ / (ε + s(c)^γ)` with `c` the candidate being scored.
    #[default]
    AsWritten,
    /// `‖c − c′‖ / (ε + s(c′)^γ)` with `c′` the already-selected seed, so
    /// high-score seeds push others away.
    ProseConsistent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpsConfig<T> {
    pub k: usize,
    pub gamma: T,
    pub epsilon: T,
    pub tail_fraction: T,
    pub mode: FpsMode,
    pub seed: u64,
}

impl<T: Real> FpsConfig<T> {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            gamma: T::one(),
            epsilon: T::lit(1e-6),
            tail_fraction: T::lit(0.1),
            mode: FpsMode::AsWritten,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::invalid("k", "must be at least 1"));
        }
        if !(self.gamma >= T::one()) {
            return Err(Error::invalid("gamma", "must be >= 1"));
        }
        if !(self.epsilon > T::zero()) {
            return Err(Error::invalid("epsilon", "must be positive"));
        }
        if !(self.tail_fraction >= T::zero() && self.tail_fraction < T::one()) {
            return Err(Error::invalid("tail_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Euclidean distance between two cells, in cell units.
#[inline]
pub fn cell_distance<T: Real>(a: (usize, usize), b: (usize, usize)) -> T {
    let du = T::from_usize_lossy(a.0) - T::from_usize_lossy(b.0);
    let dv = T::from_usize_lossy(a.1) - T::from_usize_lossy(b.1);
    (du * du + dv * dv).sqrt()
}

/// Score-reweighted distance between candidate `c` and seed `s`.
#[inline]
pub fn reweighted_distance<T: Real>(c: &Candidate<T>, s: &Candidate<T>, cfg: &FpsConfig<T>) -> T {
    let w = match cfg.mode {
        FpsMode::AsWritten => c.score,
        FpsMode::ProseConsistent => s.score,
    };
    cell_distance::<T>(c.cell, s.cell) / (cfg.epsilon + w.powf(cfg.gamma))
}

/// Indices of the tail seeds: `floor(tail_fraction · k)` (at most `k − 1`)
/// drawn without replacement from the lowest-score decile.
pub fn tail_indices<T: Real>(cands: &[Candidate<T>], cfg: &FpsConfig<T>) -> Vec<usize> {
    let budget = cfg.k.min(cands.len());
    let wanted = (cfg.tail_fraction * T::from_usize_lossy(cfg.k))
        .floor()
        .to_usize()
        .unwrap_or(0)
        .min(budget.saturating_sub(1));
    if wanted == 0 {
        return Vec::new();
    }
    let mut by_score: Vec<usize> = (0..cands.len()).collect();
    by_score.sort_by(|&a, &b| {
        cands[a]
            .score
            .partial_cmp(&cands[b].score)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let decile = cands.len().div_ceil(10).max(1);
    let wanted = wanted.min(decile);
    let mut rng = rng::seeded(cfg.seed);
    index::sample(&mut rng, decile, wanted)
        .into_iter()
        .map(|j| by_score[j])
        .collect()
}

/// Selects `min(k, |C|)` seeds: tail seeds first, then the highest-score
/// candidate, then greedy argmax over candidates of the minimum reweighted
/// distance to the FPS set. Ties go to the lowest candidate index.
pub fn score_modulated_fps<T: Real>(cands: &[Candidate<T>], cfg: &FpsConfig<T>) -> Result<Vec<Candidate<T>>> {
    cfg.validate()?;
    let n = cands.len();
    let budget = cfg.k.min(n);
    if budget == 0 {
        return Ok(Vec::new());
    }
    let mut chosen = vec![false; n];
    let mut order = tail_indices(cands, cfg);
    order.iter().for_each(|&i| chosen[i] = true);

    let mut start = None;
    for i in 0..n {
        if chosen[i] {
            continue;
        }
        if start.is_none_or(|s: usize| cands[i].score > cands[s].score) {
            start = Some(i);
        }
    }
    let Some(start) = start else {
        return Ok(order.into_iter().map(|i| cands[i].clone()).collect());
    };
    chosen[start] = true;
    order.push(start);

    let mut min_d: Vec<T> = cands.iter().map(|c| reweighted_distance(c, &cands[start], cfg)).collect();
    while order.len() < budget {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if chosen[i] {
                continue;
            }
            if best.is_none_or(|b| min_d[i] > min_d[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        chosen[b] = true;
        order.push(b);
        for i in 0..n {
            if !chosen[i] {
                min_d[i] = min_d[i].min(reweighted_distance(&cands[i], &cands[b], cfg));
            }
        }
    }
    Ok(order.into_iter().map(|i| cands[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(w: usize, h: usize, spikes: &[(usize, usize, f64)]) -> BEVHeatmap<f64> {
        let mut m = BEVHeatmap::zeros(w, h, 1, 0.4, [0.0, 0.0]);
        for &(u, v, s) in spikes {
            let i = m.cell_index(u, v);
            m.score[i] = s;
            m.occupied[i] = true;
        }
        m
    }

    fn cand(u: usize, v: usize, s: f64) -> Candidate<f64> {
        Candidate {
            cell: (u, v),
            score: s,
            feature: vec![],
        }
    }

    #[test]
    fn nms_basic_cases() {
        assert!(heatmap_nms(&map(5, 5, &[]), 2, 0.1).unwrap().is_empty());
        let one = heatmap_nms(&map(5, 5, &[(2, 3, 0.9)]), 2, 0.1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].cell, (2, 3));
        let two = heatmap_nms(&map(5, 5, &[(2, 2, 0.9), (3, 2, 0.8)]), 2, 0.1).unwrap();
        assert_eq!(two.iter().map(|c| c.cell).collect::<Vec<_>>(), vec![(2, 2)]);
        let far = heatmap_nms(&map(6, 5, &[(0, 2, 0.5), (4, 2, 0.8)]), 2, 0.1).unwrap();
        assert_eq!(far.iter().map(|c| c.cell).collect::<Vec<_>>(), vec![(4, 2), (0, 2)]);
        assert!(heatmap_nms(&map(2, 2, &[]), 0, 0.1).is_err());
    }

    #[test]
    fn nms_ties_are_not_strict_maxima() {
        let m = map(4, 1, &[(1, 0, 0.5), (2, 0, 0.5)]);
        assert!(heatmap_nms(&m, 2, 0.1).unwrap().is_empty());
    }

    #[test]
    fn fps_single_and_empty() {
        let cfg = FpsConfig::new(4, 1);
        assert!(score_modulated_fps::<f64>(&[], &cfg).unwrap().is_empty());
        let out = score_modulated_fps(&[cand(1, 1, 0.3)], &cfg).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn fps_starts_at_best_and_spreads() {
        let mut cfg = FpsConfig::new(3, 1);
        cfg.tail_fraction = 0.0;
        let cs = [cand(0, 0, 0.5), cand(1, 0, 0.5), cand(9, 0, 0.5), cand(5, 5, 0.9)];
        let out = score_modulated_fps(&cs, &cfg).unwrap();
        let cells: Vec<_> = out.iter().map(|c| c.cell).collect();
        assert_eq!(cells, vec![(5, 5), (0, 0), (9, 0)]);
    }

    #[test]
    fn tail_seeds_come_from_lowest_decile() {
        let cs: Vec<_> = (0..100).map(|i| cand(i, 0, i as f64 / 100.0)).collect();
        let mut cfg = FpsConfig::new(40, 3);
        cfg.tail_fraction = 0.2;
        let tails = tail_indices(&cs, &cfg);
        assert_eq!(tails.len(), 8);
        assert!(tails.iter().all(|&i| i < 10));
        let out = score_modulated_fps(&cs, &cfg).unwrap();
        assert_eq!(out.len(), 40);
        assert_eq!(out[8].cell, (99, 0));
    }
}
