//! Detection losses. Every loss returns its value and the gradient with
//! respect to its continuous inputs.

use super::boxes::{box_corners, corner_signs, encode_box, Box7, BoxEncoding};
use crate::error::{Error, Result};
use crate::scalar::{log_sigmoid, sigmoid};
use crate::Real;

pub const SMOOTH_L1_BETA: f64 = 1.0;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// Quadratic `x²/(2β)` below `β`, linear `|x| − β/2` above; returns the
/// value and its derivative.
pub fn smooth_l1<T: Real>(x: T, beta: T) -> (T, T) {
    let a = x.abs();
    if a < beta {
        (x * x / (beta + beta), x / beta)
    } else {
        (a - beta * T::lit(0.5), x.signum())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoteLoss<T> {
    pub value: T,
    pub grad: Vec<[T; 3]>,
    /// No matched seeds; `value` is 0.
    pub empty: bool,
}

/// Mean smooth-L1 over every coordinate of the matched seed offsets.
pub fn vote_loss<T: Real>(pred: &[[T; 3]], target: &[[T; 3]]) -> Result<VoteLoss<T>> {
    if pred.len() != target.len() {
        return Err(Error::shape("vote_loss", pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Ok(VoteLoss {
            value: T::zero(),
            grad: Vec::new(),
            empty: true,
        });
    }
    let n = T::from_usize_lossy(3 * pred.len());
    let beta = T::lit(SMOOTH_L1_BETA);
    let mut value = T::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            std::array::from_fn(|a| {
                let (v, d) = smooth_l1(p[a] - t[a], beta);
                value += v;
                d / n
            })
        })
        .collect();
    Ok(VoteLoss {
        value: value / n,
        grad,
        empty: false,
    })
}

/// Mean of `−α_t (1 − p_t)^γ log p_t` over logits, with `α_t = α` for
/// positives and `1 − α` for negatives. Returns the value and `∂L/∂logit`.
pub fn focal_objectness<T: Real>(logits: &[T], targets: &[T], alpha: T, gamma: T) -> Result<(T, Vec<T>)> {
    if logits.len() != targets.len() {
        return Err(Error::shape("focal_objectness", logits.len(), targets.len()));
    }
    if let Some(t) = targets.iter().find(|t| **t != T::zero() && **t != T::one()) {
        return Err(Error::invalid("targets", format!("must be 0 or 1, got {t:?}")));
    }
    if logits.is_empty() {
        return Ok((T::zero(), Vec::new()));
    }
    let n = T::from_usize_lossy(logits.len());
    let mut total = T::zero();
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(z, t)| {
            let (s, a) = if *t == T::one() {
                (T::one(), alpha)
            } else {
                (-T::one(), T::one() - alpha)
            };
            let sz = s * *z;
            let log_p = log_sigmoid(sz);
            let p = sigmoid(sz);
            let q = sigmoid(-sz);
            let mod_ = if gamma == T::zero() { T::one() } else { q.powf(gamma) };
            total += -a * mod_ * log_p;
            s * a * (gamma * p * mod_ * log_p - mod_ * q) / n
        })
        .collect();
    Ok((total / n, grad))
}

/// Mean negative log-softmax at each row's target class.
pub fn classification_loss<T: Real>(logits: &[Vec<T>], targets: &[usize]) -> Result<(T, Vec<Vec<T>>)> {
    if logits.len() != targets.len() {
        return Err(Error::shape("classification_loss", logits.len(), targets.len()));
    }
    if logits.is_empty() {
        return Ok((T::zero(), Vec::new()));
    }
    let n = T::from_usize_lossy(logits.len());
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(logits.len());
    for (row, &t) in logits.iter().zip(targets) {
        if t >= row.len() {
            return Err(Error::invalid("target class", format!("{t} out of range for {} classes", row.len())));
        }
        let m = row.iter().fold(T::neg_infinity(), |a, b| a.max(*b));
        let z: T = row.iter().map(|v| (*v - m).exp()).sum();
        let lse = m + z.ln();
        total += lse - row[t];
        grads.push(
            row.iter()
                .enumerate()
                .map(|(k, v)| ((*v - lse).exp() - if k == t { T::one() } else { T::zero() }) / n)
                .collect(),
        );
    }
    Ok((total / n, grads))
}

/// Mean smooth-L1 over the eight encoded components.
pub fn regression_loss<T: Real>(pred: &BoxEncoding<T>, target: &BoxEncoding<T>) -> (T, [T; 8]) {
    let (p, t) = (pred.to_array(), target.to_array());
    let n = T::lit(8.0);
    let beta = T::lit(SMOOTH_L1_BETA);
    let mut total = T::zero();
    let grad = std::array::from_fn(|k| {
        let (v, d) = smooth_l1(p[k] - t[k], beta);
        total += v;
        d / n
    });
    (total / n, grad)
}

fn corner_l1<T: Real>(pred: &Box7<T>, gt: &Box7<T>) -> (T, [T; 7]) {
    let pc = box_corners(pred);
    let gc = box_corners(gt);
    let n = T::lit(24.0);
    let (s, c) = pred.theta.sin_cos();
    let half = T::lit(0.5);
    let mut total = T::zero();
    let mut g = [T::zero(); 7];
    for i in 0..8 {
        let [sx, sy, sz] = corner_signs(i).map(|v| T::lit(v as f64) * half);
        let (dx, dy) = (sx * pred.w, sy * pred.l);
        let sign: [T; 3] = std::array::from_fn(|a| {
            let d = pc[i][a] - gc[i][a];
            total += d.abs();
            if d == T::zero() {
                T::zero()
            } else {
                d.signum()
            }
        });
        g[0] += sign[0];
        g[1] += sign[1];
        g[2] += sign[2];
        g[3] += sign[0] * c * sx + sign[1] * s * sx;
        g[4] += -sign[0] * s * sy + sign[1] * c * sy;
        g[5] += sign[2] * sz;
        g[6] += sign[0] * (-s * dx - c * dy) + sign[1] * (c * dx - s * dy);
    }
    (total / n, g.map(|v| v / n))
}

/// Mean absolute corner difference, taking the better of the predicted
/// heading and its flip by π. The gradient is with respect to the
/// predicted box fields in [`Box7::to_array`] order.
pub fn corner_loss<T: Real>(pred: &Box7<T>, gt: &Box7<T>) -> (T, [T; 7]) {
    let direct = corner_l1(pred, gt);
    let flipped_box = Box7 {
        theta: pred.theta + T::PI(),
        ..*pred
    };
    let flipped = corner_l1(&flipped_box, gt);
    if flipped.0 < direct.0 {
        flipped
    } else {
        direct
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<T> {
    pub lambda_vote: T,
    pub lambda_obj: T,
    pub lambda_cls: T,
    pub lambda_reg: T,
    pub lambda_corner: T,
}

impl<T: Real> Default for LossWeights<T> {
    fn default() -> Self {
        Self {
            lambda_vote: T::one(),
            lambda_obj: T::one(),
            lambda_cls: T::one(),
            lambda_reg: T::one(),
            lambda_corner: T::lit(3.0),
        }
    }
}

impl<T: Real> LossWeights<T> {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_vote, self.lambda_obj, self.lambda_cls, self.lambda_reg, self.lambda_corner];
        if all.iter().any(|l| !(*l >= T::zero()) || !l.is_finite()) {
            return Err(Error::invalid("loss weights", "must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents<T> {
    pub vote: T,
    pub obj: T,
    pub cls: T,
    pub reg: T,
    pub corner: T,
}

pub fn total_loss<T: Real>(c: &LossComponents<T>, w: &LossWeights<T>) -> Result<T> {
    w.validate()?;
    let named = [
        ("vote", c.vote, w.lambda_vote),
        ("obj", c.obj, w.lambda_obj),
        ("cls", c.cls, w.lambda_cls),
        ("reg", c.reg, w.lambda_reg),
        ("corner", c.corner, w.lambda_corner),
    ];
    if let Some((name, _, _)) = named.iter().find(|(_, v, _)| !v.is_finite()) {
        return Err(Error::NonFiniteLoss(name));
    }
    Ok(named.iter().fold(T::zero(), |acc, (_, v, l)| acc + *l * *v))
}

/// Regression target for a prediction matched to `gt`.
pub fn regression_target<T: Real>(gt: &Box7<T>) -> BoxEncoding<T> {
    encode_box(gt)
}
