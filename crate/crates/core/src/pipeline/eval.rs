//! Average precision with 40-point recall interpolation.

use std::fmt;
use std::path::Path;

use super::config::Difficulty;
use super::iou::{bev_iou, iou_2d, iou_3d};
use super::kitti::{read_labels, KittiObject};
use crate::error::{Error, Result};
use crate::Real;

pub const RECALL_POINTS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Image2D,
    Bev,
    Box3D,
}

/// Percentages per difficulty, indexed Easy, Moderate, Hard.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalResult {
    pub ap_3d: [f64; 3],
    pub ap_bev: [f64; 3],
    pub ap_2d: [f64; 3],
    pub aos: [f64; 3],
}

impl fmt::Display for EvalResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "metric    easy      moderate  hard")?;
        for (name, v) in [("2d", self.ap_2d), ("bev", self.ap_bev), ("3d", self.ap_3d), ("aos", self.aos)] {
            writeln!(f, "{name:<8}  {:<8.4}  {:<8.4}  {:.4}", v[0], v[1], v[2])?;
        }
        Ok(())
    }
}

/// Detections and ground truth of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult<T> {
    pub detections: Vec<KittiObject<T>>,
    pub labels: Vec<KittiObject<T>>,
}

fn overlap<T: Real>(metric: Metric, a: &KittiObject<T>, b: &KittiObject<T>) -> Result<T> {
    Ok(match metric {
        Metric::Image2D => iou_2d(&a.bbox, &b.bbox),
        Metric::Bev => bev_iou(&a.eval_box()?, &b.eval_box()?),
        Metric::Box3D => iou_3d(&a.eval_box()?, &b.eval_box()?),
    })
}

/// `(AP, AOS)` in percent for one class, metric and difficulty.
///
/// Detections are visited by descending score (ties by frame, then file
/// order). Each takes the unmatched valid ground truth with the highest
/// overlap ≥ `iou_thresh`. Unmatched detections overlapping a ground truth
/// that fails the difficulty cutoff are ignored, as are such ground truths.
pub fn average_precision<T: Real>(
    frames: &[FrameResult<T>],
    class: &str,
    metric: Metric,
    difficulty: Difficulty,
    iou_thresh: f64,
) -> Result<(f64, f64)> {
    let thr = T::lit(iou_thresh);
    let mut order: Vec<(T, usize, usize)> = Vec::new();
    let mut n_gt = 0usize;
    for (f, fr) in frames.iter().enumerate() {
        n_gt += fr.labels.iter().filter(|g| g.class == class && g.fits(difficulty)).count();
        for (i, d) in fr.detections.iter().enumerate() {
            if d.class == class {
                order.push((d.score.unwrap_or_else(T::one), f, i));
            }
        }
    }
    if n_gt == 0 {
        return Ok((0.0, 0.0));
    }
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then((a.1, a.2).cmp(&(b.1, b.2))));

    let mut matched: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.labels.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut similarity = 0.0;
    // (tp, precision, orientation-similarity precision) after each counted detection.
    let mut curve: Vec<(usize, f64, f64)> = Vec::new();
    for &(_, f, i) in &order {
        let det = &frames[f].detections[i];
        let mut best: Option<(T, usize)> = None;
        let mut hits_ignored = false;
        for (j, g) in frames[f].labels.iter().enumerate() {
            if g.class != class {
                continue;
            }
            let o = overlap(metric, det, g)?;
            if o < thr {
                continue;
            }
            if !g.fits(difficulty) {
                hits_ignored = true;
            } else if !matched[f][j] && best.is_none_or(|(b, _)| o > b) {
                best = Some((o, j));
            }
        }
        match best {
            Some((_, j)) => {
                matched[f][j] = true;
                tp += 1;
                let da = (det.alpha - frames[f].labels[j].alpha).to_f64_lossy();
                similarity += (1.0 + da.cos()) / 2.0;
            }
            None if hits_ignored => continue,
            None => fp += 1,
        }
        let n = (tp + fp) as f64;
        curve.push((tp, tp as f64 / n, similarity / n));
    }

    let (mut ap, mut aos) = (0.0, 0.0);
    for r in 1..=RECALL_POINTS {
        // recall tp/n_gt ≥ r/40, compared exactly in integers.
        let reach = curve.iter().filter(|(t, _, _)| t * RECALL_POINTS >= r * n_gt);
        let (p, s) = reach.fold((0.0f64, 0.0f64), |(p, s), (_, q, o)| (p.max(*q), s.max(*o)));
        ap += p;
        aos += s;
    }
    let scale = 100.0 / RECALL_POINTS as f64;
    Ok((ap * scale, aos * scale))
}

/// All four metrics at every difficulty for `class`.
pub fn evaluate<T: Real>(frames: &[FrameResult<T>], class: &str, iou_thresh: f64) -> Result<EvalResult> {
    if !(0.0..=1.0).contains(&iou_thresh) {
        return Err(Error::invalid("iou", format!("{iou_thresh} not in [0, 1]")));
    }
    let mut out = EvalResult::default();
    for (k, d) in Difficulty::ALL.into_iter().enumerate() {
        let (ap2, aos) = average_precision(frames, class, Metric::Image2D, d, iou_thresh)?;
        out.ap_2d[k] = ap2;
        out.aos[k] = aos;
        out.ap_bev[k] = average_precision(frames, class, Metric::Bev, d, iou_thresh)?.0;
        out.ap_3d[k] = average_precision(frames, class, Metric::Box3D, d, iou_thresh)?.0;
    }
    Ok(out)
}

/// Pairs `labels/ID.txt` with `dets/ID.txt` for every label file; a missing
/// detection file counts as no detections.
pub fn load_eval_dirs<T: Real>(dets: &Path, labels: &Path) -> Result<Vec<FrameResult<T>>> {
    if !dets.is_dir() {
        let e = std::io::Error::new(std::io::ErrorKind::NotFound, "no such directory");
        return Err(Error::io(dets, e));
    }
    let entries = std::fs::read_dir(labels).map_err(|e| Error::io(labels, e))?;
    let mut ids: Vec<String> = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(labels, e))?.path();
        if p.extension().is_some_and(|x| x == "txt") {
            if let Some(s) = p.file_stem().and_then(|s| s.to_str()) {
                ids.push(s.to_string());
            }
        }
    }
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let d = dets.join(format!("{id}.txt"));
            let detections = if d.exists() { read_labels(&d)? } else { Vec::new() };
            Ok(FrameResult {
                detections,
                labels: read_labels(&labels.join(format!("{id}.txt")))?,
            })
        })
        .collect()
}
