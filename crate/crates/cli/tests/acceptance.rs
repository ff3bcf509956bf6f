//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use fusiondet_core::attention::attn::attend;
use fusiondet_core::attention::block::transformer_backward_shared;
use fusiondet_core::attention::{cross_attention, transformer_forward, AttentionConfig, AttnParams, TokenBank, TransformerWeights};
use fusiondet_core::backbone::{
    backbone_backward, backbone_features, backbone_forward, strided_conv, submanifold_conv, voxelize, BackboneConfig,
    BackboneWeights, BevGeometry, ConvParams, SparseTensor3D,
};
use fusiondet_core::calib::{back_project_pixel, cam_to_lidar, project_lidar_to_image, CalibrationSet};
use fusiondet_core::fusion::{FusedCloud, Point8D};
use fusiondet_core::gradcheck::{check_params, check_vector, DEFAULT_FLOOR, DEFAULT_STEP};
use fusiondet_core::head::{
    classification_loss, corner_loss, decode_box, encode_box, focal_objectness, regression_loss, total_loss,
    vote_loss, Box7, BoxEncoding, LossComponents, LossWeights,
};
use fusiondet_core::pipeline::constructed::smoke_config;
use fusiondet_core::pipeline::eval::{average_precision, evaluate, FrameResult, Metric};
use fusiondet_core::pipeline::kitti::read_labels;
use fusiondet_core::pipeline::{Difficulty, KittiObject};
use fusiondet_core::query::seeds::{score_modulated_fps, FpsConfig, FpsMode};
use fusiondet_core::query::Candidate;
use fusiondet_core::rng;
use fusiondet_core::virtual_points::{range_aware_sample, RangeSampleConfig};
use fusiondet_core::weights::ParamSet;
use rand::Rng;

type Outcome = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn rotation(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = axis.map(|a| a / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn mul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    o
}

fn geometry_round_trip() -> Outcome {
    let start = Instant::now();
    let (w, h) = (1242usize, 375usize);
    let p2 = [[721.5377, 0.0, 609.5593, 0.0], [0.0, 721.5377, 172.854, 0.0], [0.0, 0.0, 1.0, 0.0]];
    let r0 = rotation([0.3, -1.0, 0.2], 0.012);
    let axes = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];
    let rot = mul3(&rotation([1.0, 0.4, -0.3], 0.02), &axes);
    let t = [-0.004, -0.076, -0.272];
    let tr = [0, 1, 2].map(|i| [rot[i][0], rot[i][1], rot[i][2], t[i]]);
    let calib = CalibrationSet::new(p2, r0, tr).map_err(|e| e.to_string())?;
    let mut r = rng::seeded(101);
    let mut worst = 0.0f64;
    for _ in 0..100_000 {
        let u = r.gen_range(0.0..w as f64);
        let v = r.gen_range(0.0..h as f64);
        let depth = r.gen_range(0.5..80.0);
        let p = cam_to_lidar(&back_project_pixel(u, v, depth, &calib).map_err(|e| e.to_string())?, &calib);
        let px = project_lidar_to_image(&p, &calib, Some((w, h))).map_err(|e| format!("{e:?} for {p:?}"))?;
        let cam = back_project_pixel(px.u, px.v, px.depth, &calib).map_err(|e| e.to_string())?;
        let q = cam_to_lidar(&cam, &calib);
        let err = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
        worst = worst.max(err);
    }
    let took = start.elapsed();
    ensure!(worst <= 1e-9, "max round-trip error {worst:e} m");
    ensure!(took < Duration::from_secs(5), "took {took:?}");
    Ok(())
}

/// Recomputes every minimum from scratch at each iteration.
fn fps_oracle(cands: &[Candidate<f64>], k: usize, gamma: f64, eps: f64, mode: FpsMode) -> Vec<usize> {
    let n = cands.len();
    let budget = k.min(n);
    let mut start = 0;
    for i in 1..n {
        if cands[i].score > cands[start].score {
            start = i;
        }
    }
    let d = |i: usize, s: usize| {
        let du = cands[i].cell.0 as f64 - cands[s].cell.0 as f64;
        let dv = cands[i].cell.1 as f64 - cands[s].cell.1 as f64;
        let w = match mode {
            FpsMode::AsWritten => cands[i].score,
            FpsMode::ProseConsistent => cands[s].score,
        };
        (du * du + dv * dv).sqrt() / (eps + w.powf(gamma))
    };
    let mut sel = vec![start];
    while sel.len() < budget {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|i| !sel.contains(i)) {
            let m = sel.iter().map(|&s| d(i, s)).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, b)| m > b) {
                best = Some((i, m));
            }
        }
        sel.push(best.expect("budget bounded by n").0);
    }
    sel
}

fn plain_fps(cells: &[(usize, usize)], k: usize) -> Vec<usize> {
    let mut sel = vec![0];
    while sel.len() < k.min(cells.len()) {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..cells.len()).filter(|i| !sel.contains(i)) {
            let m = sel
                .iter()
                .map(|&s| {
                    let (du, dv) = (cells[i].0 as f64 - cells[s].0 as f64, cells[i].1 as f64 - cells[s].1 as f64);
                    (du * du + dv * dv).sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, b)| m > b) {
                best = Some((i, m));
            }
        }
        sel.push(best.unwrap().0);
    }
    sel
}

fn fps_oracle_match() -> Outcome {
    let mut r = rng::seeded(202);
    for trial in 0..200 {
        let n = r.gen_range(1..=12);
        let mut cells = BTreeSet::new();
        while cells.len() < n {
            cells.insert((r.gen_range(0..16usize), r.gen_range(0..16usize)));
        }
        let mut cells: Vec<(usize, usize)> = cells.into_iter().collect();
        for i in (1..cells.len()).rev() {
            cells.swap(i, r.gen_range(0..=i));
        }
        let equal = trial % 4 == 0;
        let cands: Vec<Candidate<f64>> = cells
            .iter()
            .map(|&cell| Candidate {
                cell,
                score: if equal { 0.5 } else { r.gen_range(0.05..1.0) },
                feature: vec![],
            })
            .collect();
        let k = r.gen_range(1..=n + 2);
        let gamma = [1.0, 1.5, 2.0][trial % 3];
        for mode in [FpsMode::AsWritten, FpsMode::ProseConsistent] {
            let cfg = FpsConfig {
                k,
                gamma,
                epsilon: 1e-6,
                tail_fraction: 0.0,
                mode,
                seed: trial as u64,
            };
            let got: Vec<(usize, usize)> = score_modulated_fps(&cands, &cfg)
                .map_err(|e| e.to_string())?
                .iter()
                .map(|c| c.cell)
                .collect();
            let want: Vec<(usize, usize)> = fps_oracle(&cands, k, gamma, 1e-6, mode).iter().map(|&i| cells[i]).collect();
            ensure!(got == want, "trial {trial} {mode:?}: {got:?} vs oracle {want:?}");
            if equal {
                let plain: Vec<(usize, usize)> = plain_fps(&cells, k).iter().map(|&i| cells[i]).collect();
                ensure!(got == plain, "trial {trial} equal scores: {got:?} vs plain FPS {plain:?}");
            }
        }
    }
    Ok(())
}

struct Dense {
    lo: [i32; 3],
    dims: [usize; 3],
    ch: usize,
    data: Vec<f64>,
}

impl Dense {
    fn from_sparse(x: &SparseTensor3D<f64>, pad: i32) -> Self {
        let mut lo = [i32::MAX; 3];
        let mut hi = [i32::MIN; 3];
        for c in x.coords() {
            for a in 0..3 {
                lo[a] = lo[a].min(c[a] - pad);
                hi[a] = hi[a].max(c[a] + pad);
            }
        }
        let dims = [0, 1, 2].map(|a| (hi[a] - lo[a] + 1) as usize);
        let ch = x.channels();
        let mut d = Self {
            lo,
            dims,
            ch,
            data: vec![0.0; dims[0] * dims[1] * dims[2] * ch],
        };
        for (i, c) in x.coords().iter().enumerate() {
            let at = d.index(*c).unwrap();
            d.data[at..at + ch].copy_from_slice(x.feature(i));
        }
        d
    }

    fn index(&self, c: [i32; 3]) -> Option<usize> {
        let mut flat = 0;
        for a in 0..3 {
            let o = c[a] - self.lo[a];
            if o < 0 || o as usize >= self.dims[a] {
                return None;
            }
            flat = flat * self.dims[a] + o as usize;
        }
        Some(flat * self.ch)
    }

    /// `b + Σ_δ W[δ]ᵀ x(base + δ)` with zeros outside the volume.
    fn conv_at(&self, base: [i32; 3], p: &ConvParams<f64>) -> Vec<f64> {
        let mut acc = p.bias.clone();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(at) = self.index([base[0] + dx, base[1] + dy, base[2] + dz]) else {
                        continue;
                    };
                    let tap = (((dx + 1) * 3 + dy + 1) * 3 + dz + 1) as usize;
                    for i in 0..self.ch {
                        for (o, a) in acc.iter_mut().enumerate() {
                            *a += p.weight[(tap * p.in_ch + i) * p.out_ch + o] * self.data[at + i];
                        }
                    }
                }
            }
        }
        acc
    }
}

fn sparse_conv_equivalence() -> Outcome {
    let mut r = rng::seeded(303);
    let mut worst = 0.0f64;
    for scene in 0..100 {
        let n = r.gen_range(1..=30);
        let mut coords = BTreeSet::new();
        for _ in 0..n {
            coords.insert([r.gen_range(-4..4), r.gen_range(-4..4), r.gen_range(-3..3)]);
        }
        let coords: Vec<[i32; 3]> = coords.into_iter().collect();
        let (ci, co) = (r.gen_range(1..4), r.gen_range(1..4));
        let feats: Vec<f64> = (0..coords.len() * ci).map(|_| r.gen_range(-1.0..1.0)).collect();
        let x = SparseTensor3D::new(coords.clone(), feats, ci, 1).map_err(|e| e.to_string())?;
        let p = ConvParams::init_uniform(27, ci, co, scene);
        // The weight layout the oracle assumes.
        ensure!(p.w(5, ci - 1, co - 1) == p.weight[(5 * ci + ci - 1) * co + co - 1], "weight layout");
        let dense = Dense::from_sparse(&x, 3);

        let y = submanifold_conv(&x, &p).map_err(|e| e.to_string())?;
        ensure!(y.coords() == x.coords(), "scene {scene}: submanifold changed the active set");
        for (i, c) in y.coords().iter().enumerate() {
            for (a, b) in y.feature(i).iter().zip(dense.conv_at(*c, &p)) {
                worst = worst.max((a - b).abs());
            }
        }

        let s = strided_conv(&x, &p).map_err(|e| e.to_string())?;
        let parents: BTreeSet<[i32; 3]> = coords.iter().map(|c| c.map(|v| v.div_euclid(2))).collect();
        let got: BTreeSet<[i32; 3]> = s.coords().iter().copied().collect();
        ensure!(got == parents && s.len() == parents.len(), "scene {scene}: strided sites differ");
        ensure!(s.stride() == 2, "scene {scene}: stride {}", s.stride());
        for (i, c) in s.coords().iter().enumerate() {
            for (a, b) in s.feature(i).iter().zip(dense.conv_at(c.map(|v| 2 * v), &p)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure!(worst < 1e-5, "max deviation from dense oracle {worst:e}");
    Ok(())
}

fn grad_ok(name: &str, f: impl FnMut(&[f64]) -> f64, x: &[f64], g: &[f64]) -> Outcome {
    let rep = check_vector(name, f, x, g, 100, DEFAULT_STEP, DEFAULT_FLOOR);
    ensure!(rep.passes(1e-4), "{rep:?}");
    Ok(())
}

fn attn_cfg(heads: usize, d: usize, layers: usize) -> AttentionConfig<f64> {
    AttentionConfig {
        heads,
        d_model: d,
        layers,
        ffn_dim: 12,
        bias_bins: 3,
        bias_range: 2.0,
        k_voxel: 4,
        k_point: 4,
    }
}

fn random_vec(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

fn random_bank(r: &mut impl Rng, n: usize, d: usize, masked: &[usize]) -> TokenBank<f64> {
    let mut b = TokenBank::empty(d);
    for j in 0..n {
        let p = [r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0), r.gen_range(-1.0..1.0)];
        b.push(p, &random_vec(r, d), !masked.contains(&j));
    }
    b
}

fn random_box(r: &mut impl Rng) -> Box7<f64> {
    Box7::new(
        [r.gen_range(-40.0..40.0), r.gen_range(-40.0..40.0), r.gen_range(-3.0..1.0)],
        [r.gen_range(0.3..6.0), r.gen_range(0.3..3.0), r.gen_range(0.5..2.5)],
        r.gen_range(-PI..PI),
    )
    .unwrap()
}

fn gradient_suite() -> Outcome {
    // Backbone through the score head.
    let cfg = BackboneConfig {
        channels: [4, 4, 6, 6],
        bev_channels: 5,
    };
    let geom = BevGeometry::from_range([0.0, 0.0], [3.2, 3.2], 0.1).map_err(|e| e.to_string())?;
    let mut r = rng::seeded(404);
    let pts: Vec<Point8D<f64>> = (0..80)
        .map(|_| Point8D::real(r.gen_range(0.0..3.2), r.gen_range(0.0..3.2), r.gen_range(0.0..0.8), r.gen_range(0.0..1.0)))
        .collect();
    let grid = voxelize(&FusedCloud::from_points(pts), 0.1, [0.0; 3], 3).map_err(|e| e.to_string())?;
    ensure!(grid.len() <= 100, "{} voxels", grid.len());
    let mut w = BackboneWeights::init(&cfg, 9);
    w.visit_mut("", &mut |name, _, v| {
        if name.ends_with("bias") {
            v.iter_mut().for_each(|b| *b += 0.3);
        }
    });
    let out = backbone_forward(&grid, &w, &geom).map_err(|e| e.to_string())?;
    let readout = random_vec(&mut r, out.heat.n_cells());
    let (_, cache) = backbone_features(&grid, &w, &geom).map_err(|e| e.to_string())?;
    let grads = backbone_backward(&cache, &out, &w, &readout, None);
    let loss = |w: &BackboneWeights<f64>| -> f64 {
        let o = backbone_forward(&grid, w, &geom).unwrap();
        o.heat.score.iter().zip(&readout).map(|(s, g)| s * g).sum()
    };
    for rep in check_params(&w, &grads, loss, 100, DEFAULT_STEP, DEFAULT_FLOOR) {
        ensure!(rep.passes(1e-4), "backbone {rep:?}");
    }

    // Attention stack: weights, queries and bank.
    let c = attn_cfg(2, 8, 2);
    let mut tw = TransformerWeights::init(&c, 6);
    tw.visit_mut("", &mut |_, _, v| v.iter_mut().for_each(|x| *x += r.gen_range(-0.3..0.3)));
    let bank = random_bank(&mut r, 8, 8, &[5]);
    let qs: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut r, 8)).collect();
    let pos: Vec<[f64; 3]> = (0..4).map(|_| [r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), 0.0]).collect();
    let readout: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut r, 8)).collect();
    let aloss = |w: &TransformerWeights<f64>, qs: &[Vec<f64>], bank: &TokenBank<f64>| -> f64 {
        let out = transformer_forward(qs, &pos, std::slice::from_ref(bank), w, &c).unwrap();
        out.iter().zip(&readout).map(|(o, g)| o.iter().zip(g).map(|(a, b)| a * b).sum::<f64>()).sum()
    };
    let g = transformer_backward_shared(&qs, &pos, &bank, &tw, &c, &readout);
    for rep in check_params(&tw, &g.weights, |p| aloss(p, &qs, &bank), 100, DEFAULT_STEP, DEFAULT_FLOOR) {
        ensure!(rep.passes(1e-4), "attention {rep:?}");
    }
    grad_ok(
        "attention queries",
        |v| aloss(&tw, &v.chunks(8).map(<[f64]>::to_vec).collect::<Vec<_>>(), &bank),
        &qs.concat(),
        &g.queries.concat(),
    )?;
    let mut probe = bank.clone();
    grad_ok(
        "attention bank",
        |v| {
            probe.features.copy_from_slice(v);
            aloss(&tw, &qs, &probe)
        },
        &bank.features,
        &g.bank,
    )?;

    // Every loss.
    let pred: Vec<[f64; 3]> = (0..4).map(|_| [0.0; 3].map(|_: f64| r.gen_range(-2.5..2.5))).collect();
    let target: Vec<[f64; 3]> = (0..4).map(|_| [0.0; 3].map(|_: f64| r.gen_range(-1.0..1.0))).collect();
    let vg = vote_loss(&pred, &target).map_err(|e| e.to_string())?.grad.concat();
    grad_ok(
        "vote",
        |v| {
            let p: Vec<[f64; 3]> = v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            vote_loss(&p, &target).unwrap().value
        },
        &pred.concat(),
        &vg,
    )?;
    let z = random_vec(&mut r, 20).iter().map(|v| v * 4.0).collect::<Vec<_>>();
    let t: Vec<f64> = (0..20).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
    for gamma in [0.0, 1.5, 2.0] {
        let (_, g) = focal_objectness(&z, &t, 0.25, gamma).map_err(|e| e.to_string())?;
        grad_ok("focal", |v| focal_objectness(v, &t, 0.25, gamma).unwrap().0, &z, &g)?;
    }
    let rows: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut r, 3).iter().map(|v| v * 3.0).collect()).collect();
    let cls = [2, 0, 1, 1];
    let (_, g) = classification_loss(&rows, &cls).map_err(|e| e.to_string())?;
    grad_ok(
        "classification",
        |v| classification_loss(&v.chunks(3).map(<[f64]>::to_vec).collect::<Vec<_>>(), &cls).unwrap().0,
        &rows.concat(),
        &g.concat(),
    )?;
    // Boxes near the origin keep finite-difference round-off below the floor.
    let local = |r: &mut rng::SeededRng| {
        let b = random_box(r);
        Box7 {
            x: b.x / 20.0,
            y: b.y / 20.0,
            ..b
        }
    };
    let (a, b) = (local(&mut r), local(&mut r));
    let near = Box7 {
        x: b.x + 0.3,
        y: b.y - 0.2,
        ..b
    };
    for p in [a, near] {
        let pe = encode_box(&p).to_array();
        let te = encode_box(&b);
        let (_, g) = regression_loss(&BoxEncoding::from_array(pe), &te);
        grad_ok("regression", |v| regression_loss(&BoxEncoding::from_array(v.try_into().unwrap()), &te).0, &pe, &g)?;
        let (_, g) = corner_loss(&p, &b);
        grad_ok("corner", |v| corner_loss(&Box7::from_array(v.try_into().unwrap()), &b).0, &p.to_array(), &g)?;
    }
    Ok(())
}

fn attention_invariants() -> Outcome {
    let mut r = rng::seeded(505);
    for trial in 0..50u64 {
        let c = attn_cfg(4, 8, 2);
        let n = r.gen_range(2..10);
        let masked: Vec<usize> = (0..n).filter(|_| r.gen_bool(0.2)).collect();
        let bank = random_bank(&mut r, n, 8, &masked);
        let params = AttnParams::init(&c, trial);
        let q = random_vec(&mut r, 8);
        let (_, cache) = attend(&q, &[0.1, -0.2, 0.0], &(0..n).map(|j| bank.feature(j).to_vec()).collect::<Vec<_>>(), &bank, &params, &c);
        if bank.mask.iter().any(|m| *m) {
            for (h, row) in cache.probs().iter().enumerate() {
                let s: f64 = row.iter().sum();
                ensure!((s - 1.0).abs() <= 1e-6, "trial {trial} head {h}: row sum {s}");
                for &j in &masked {
                    ensure!(row[j] == 0.0, "masked slot {j} got weight {}", row[j]);
                }
            }
        }

        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        let mut shuffled = TokenBank::empty(8);
        for &j in &perm {
            shuffled.push(bank.positions[j], bank.feature(j), bank.mask[j]);
        }
        let w = TransformerWeights::init(&c, trial + 1);
        let qs: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut r, 8)).collect();
        let pos = vec![[0.5, -0.5, 0.0]; 3];
        let a = transformer_forward(&qs, &pos, std::slice::from_ref(&bank), &w, &c).map_err(|e| e.to_string())?;
        let b = transformer_forward(&qs, &pos, &[shuffled.clone()], &w, &c).map_err(|e| e.to_string())?;
        ensure!(a == b, "trial {trial}: permuted bank changed the stack output");
        let a = cross_attention(&qs, &pos, std::slice::from_ref(&bank), &params, &c).map_err(|e| e.to_string())?;
        let b = cross_attention(&qs, &pos, &[shuffled], &params, &c).map_err(|e| e.to_string())?;
        ensure!(a == b, "trial {trial}: permuted bank changed cross-attention");

        let id = AttnParams::identity(&c);
        let mut single = TokenBank::empty(8);
        let value = random_vec(&mut r, 8);
        single.push([1.0, 2.0, 0.0], &value, true);
        single.push([0.0; 3], &random_vec(&mut r, 8), false);
        let out = cross_attention(std::slice::from_ref(&q), &[[0.0; 3]], &[single], &id, &c).map_err(|e| e.to_string())?;
        ensure!(out[0] == value, "single key: {:?} vs {:?}", out[0], value);
    }
    Ok(())
}

fn loss_anchors() -> Outcome {
    let comps = LossComponents {
        vote: 0.1,
        obj: 0.2,
        cls: 0.3,
        reg: 0.4,
        corner: 0.5,
    };
    let lambda = LossWeights {
        lambda_vote: 1.0,
        lambda_obj: 1.0,
        lambda_cls: 1.0,
        lambda_reg: 1.0,
        lambda_corner: 3.0,
    };
    let total = total_loss(&comps, &lambda).map_err(|e| e.to_string())?;
    ensure!(total == 2.5, "total_loss = {total:?}");

    let gt = Box7::new([3.0, 1.0, -1.0], [2.0, 2.0, 1.5], 0.3).map_err(|e| e.to_string())?;
    let shifted = Box7 { x: gt.x + 1.0, ..gt };
    let cl: f64 = corner_loss(&shifted, &gt).0;
    ensure!((cl - 1.0 / 3.0).abs() <= 1e-12, "corner loss {cl}");

    let mut r = rng::seeded(606);
    for _ in 0..10_000 {
        let b = random_box(&mut r);
        let d = decode_box(&encode_box(&b)).map_err(|e| e.to_string())?;
        for (x, y) in b.to_array().iter().zip(d.to_array()) {
            ensure!((x - y).abs() <= 1e-9, "{b:?} decoded to {d:?}");
        }
    }
    Ok(())
}

fn at_range(r: &mut impl Rng, range: f64) -> Point8D<f64> {
    let a = r.gen_range(-PI..PI);
    Point8D::virtual_point([range * a.cos(), range * a.sin(), r.gen_range(-2.0..0.0)], [0.5; 3])
}

fn range_sampling() -> Outcome {
    let mut r = rng::seeded(707);
    let pts: Vec<Point8D<f64>> = (0..10_000).map(|_| at_range(&mut r, 10.0)).collect();
    let kept = range_aware_sample(&pts, &RangeSampleConfig::training(1)).map_err(|e| e.to_string())?;
    ensure!(kept.len() == 2_000, "kept {} of 10000", kept.len());

    for trial in 0..1_000u64 {
        let cfg = if trial % 2 == 0 {
            RangeSampleConfig::training(trial)
        } else {
            RangeSampleConfig::inference(trial)
        };
        let n = r.gen_range(0..300);
        let pts: Vec<Point8D<f64>> = (0..n)
            .map(|_| {
                let range = r.gen_range(0.0..120.0);
                at_range(&mut r, range)
            })
            .collect();
        let kept = range_aware_sample(&pts, &cfg).map_err(|e| e.to_string())?;
        // A bin is far when its upper edge passes the threshold.
        let width = cfg.max_range / cfg.n_bins as f64;
        let far = |p: &Point8D<f64>| {
            let d = p.horizontal_range();
            d >= cfg.max_range || ((d / width).floor() + 1.0) * width > cfg.near_threshold
        };
        let must: Vec<&Point8D<f64>> = pts.iter().filter(|p| far(p)).collect();
        let kept_far = kept.iter().filter(|p| far(p)).count();
        ensure!(kept_far == must.len(), "trial {trial}: kept {kept_far} of {} far points", must.len());
        ensure!(must.iter().all(|p| kept.contains(p)), "trial {trial}: a far point was dropped");
    }
    Ok(())
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_fusiondet")
}

fn run(args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin()).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`fusiondet {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

const SMOKE_CENTER: [f64; 2] = [8.0, 1.0];

fn smoke_scene_text() -> String {
    format!(
        "seed = 7\nground_z = -2.6\nlidar_beams = 64\nlidar_azimuth_steps = 1024\nlidar_fov_up = 2\nlidar_fov_down = -24.8\n\
         lidar_azimuth_fov = 120\nmax_range = 40\nimage_width = 320\nimage_height = 96\nfocal = 180\n\
         object = Car {} {} -1.82 3.9 1.6 1.56 0\n",
        SMOKE_CENTER[0], SMOKE_CENTER[1]
    )
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn end_to_end_liveness() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let cfg = smoke_config();
    std::fs::write(d.join("scene.txt"), smoke_scene_text()).map_err(|e| e.to_string())?;
    std::fs::write(d.join("detector.cfg"), cfg.to_text()).map_err(|e| e.to_string())?;
    let frames = d.join("frames");
    let weights = d.join("constructed.bin");
    run(&["synth", "--spec", p(&d.join("scene.txt")), "--out", p(&frames)])?;
    let center = format!("{},{}", SMOKE_CENTER[0], SMOKE_CENTER[1]);
    run(&[
        "init-weights",
        "--config",
        p(&d.join("detector.cfg")),
        "--out",
        p(&weights),
        "--constructed",
        &center,
        "--ground-z",
        "-2.6",
    ])?;
    let calib = CalibrationSet::<f64>::load_kitti(&frames.join("calib").join("000000.txt")).map_err(|e| e.to_string())?;
    let cell = cfg.voxel_size * 8.0;
    for mode in ["early", "late", "gated"] {
        let out = d.join(format!("dets_{mode}"));
        run(&[
            "detect",
            "--config",
            p(&d.join("detector.cfg")),
            "--frames",
            p(&frames),
            "--weights",
            p(&weights),
            "--out",
            p(&out),
            "--fusion",
            mode,
        ])?;
        let dets = read_labels::<f64>(&out.join("000000.txt")).map_err(|e| e.to_string())?;
        let mut best = f64::INFINITY;
        for det in &dets {
            let b = det.lidar_box(&calib).map_err(|e| e.to_string())?;
            best = best.min((b.x - SMOKE_CENTER[0]).hypot(b.y - SMOKE_CENTER[1]) / cell);
        }
        ensure!(!dets.is_empty(), "{mode}: no detections");
        ensure!(best <= 2.0, "{mode}: nearest detection {best:.2} cells from the box");
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(10), "full run took {took:?}");
    Ok(())
}

fn gt_box(x: f64, z: f64, left: f64) -> KittiObject<f64> {
    KittiObject {
        class: "Car".into(),
        truncation: 0.0,
        occlusion: 0,
        alpha: 0.0,
        bbox: [left, 100.0, left + 60.0, 160.0],
        dims: [1.5, 1.6, 3.9],
        location: [x, 1.7, z],
        rotation_y: 0.0,
        score: None,
    }
}

fn scored(o: &KittiObject<f64>, score: f64, shift: f64) -> KittiObject<f64> {
    let mut d = KittiObject {
        score: Some(score),
        ..o.clone()
    };
    d.location[0] += shift;
    d.bbox[0] += shift * 15.0;
    d.bbox[2] += shift * 15.0;
    d
}

fn evaluation_correctness() -> Outcome {
    // TP (0.9), FP (0.8), TP (0.7) over three ground truths: precision 1 up
    // to recall 1/3 (r = 1..13 of 40), then 2/3 up to recall 2/3 (r = 14..26).
    let expected = 100.0 * (13.0 + 13.0 * 2.0 / 3.0) / 40.0;
    let (a, b, c) = (gt_box(0.0, 15.0, 100.0), gt_box(2.0, 25.0, 200.0), gt_box(-3.0, 35.0, 300.0));
    let frames = vec![
        FrameResult {
            detections: vec![scored(&a, 0.9, 0.0)],
            labels: vec![a.clone()],
        },
        FrameResult {
            detections: vec![scored(&b, 0.8, 20.0)],
            labels: vec![b.clone()],
        },
        FrameResult {
            detections: vec![scored(&c, 0.7, 0.0)],
            labels: vec![c.clone()],
        },
    ];
    for metric in [Metric::Box3D, Metric::Bev, Metric::Image2D] {
        let (ap, _) = average_precision(&frames, "Car", metric, Difficulty::Easy, 0.7).map_err(|e| e.to_string())?;
        ensure!((ap - expected).abs() <= 1e-6, "{metric:?}: AP {ap} vs {expected}");
    }
    let same = vec![FrameResult {
        detections: vec![scored(&a, 0.6, 0.0), scored(&b, 0.5, 0.0)],
        labels: vec![a, b],
    }];
    let res = evaluate(&same, "Car", 0.7).map_err(|e| e.to_string())?;
    for row in [res.ap_3d, res.ap_bev, res.ap_2d] {
        ensure!(row.iter().all(|v| *v == 100.0), "identical detections gave {res}");
    }
    Ok(())
}

fn read_tree(root: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    let mut names: Vec<_> = std::fs::read_dir(root)
        .map_err(|e| e.to_string())?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    names.sort();
    for path in names {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        out.push((name, std::fs::read(&path).map_err(|e| e.to_string())?));
    }
    Ok(out)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let mut cfg = smoke_config();
    cfg.score_thresh = 0.0;
    cfg.seed_score_thresh = 0.0;
    std::fs::write(d.join("scene.txt"), smoke_scene_text()).map_err(|e| e.to_string())?;
    std::fs::write(d.join("detector.cfg"), cfg.to_text()).map_err(|e| e.to_string())?;
    let frames = d.join("frames");
    let weights = d.join("random.bin");
    run(&["synth", "--spec", p(&d.join("scene.txt")), "--out", p(&frames), "--count", "2"])?;
    run(&["init-weights", "--config", p(&d.join("detector.cfg")), "--out", p(&weights), "--seed", "11"])?;
    let mut trees = Vec::new();
    for k in 0..2 {
        let out = d.join(format!("run{k}"));
        run(&[
            "detect",
            "--config",
            p(&d.join("detector.cfg")),
            "--frames",
            p(&frames),
            "--weights",
            p(&weights),
            "--out",
            p(&out),
            "--seed",
            "3",
        ])?;
        run(&[
            "export-heatmap",
            "--config",
            p(&d.join("detector.cfg")),
            "--frames",
            p(&frames),
            "--weights",
            p(&weights),
            "--frame",
            "000001",
            "--out",
            p(&out.join("heat.pgm")),
            "--seed",
            "3",
        ])?;
        trees.push(read_tree(&out)?);
    }
    ensure!(trees[0].len() == 3, "expected 2 detection files and a heatmap, got {}", trees[0].len());
    ensure!(
        trees[0].iter().filter(|(n, _)| n.ends_with(".txt")).all(|(_, b)| !b.is_empty()),
        "a detection file is empty"
    );
    for ((na, a), (nb, b)) in trees[0].iter().zip(&trees[1]) {
        ensure!(na == nb && a == b, "{na} differs between runs");
    }
    Ok(())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("geometry round trip", geometry_round_trip),
        ("score-modulated FPS oracle", fps_oracle_match),
        ("sparse conv equivalence", sparse_conv_equivalence),
        ("gradient suite", gradient_suite),
        ("attention invariants", attention_invariants),
        ("loss anchors", loss_anchors),
        ("range-aware sampling", range_sampling),
        ("end-to-end liveness", end_to_end_liveness),
        ("evaluation correctness", evaluation_correctness),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => println!("criterion {:>2} PASS  {name} ({took:.2} s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
