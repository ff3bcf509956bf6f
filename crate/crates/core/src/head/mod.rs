//! Per-query prediction heads, box coding and losses.

pub mod boxes;
pub mod loss;

pub use boxes::{box_corners, decode_box, encode_box, Box7, BoxEncoding};
pub use loss::{
    classification_loss, corner_loss, focal_objectness, regression_loss, smooth_l1, total_loss, vote_loss,
    LossComponents, LossWeights, VoteLoss,
};

use crate::error::Result;
use crate::nn::Linear;
use crate::rng::derive_seed;
use crate::scalar::sigmoid;
use crate::weights::{join, ParamSet};
use crate::Real;

pub const CLASSES: [&str; 3] = ["Car", "Pedestrian", "Cyclist"];

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights<T> {
    pub objectness: Linear<T>,
    pub class: Linear<T>,
    /// `(Δx, Δy, Δz, log w, log l, log h, sin θ, cos θ)`; the center is
    /// relative to the query's proto-center.
    pub box_reg: Linear<T>,
}

impl<T: Real> HeadWeights<T> {
    pub fn zeros(d: usize) -> Self {
        Self {
            objectness: Linear::zeros(d, 1),
            class: Linear::zeros(d, CLASSES.len()),
            box_reg: Linear::zeros(d, 8),
        }
    }

    pub fn init(d: usize, seed: u64) -> Self {
        let mut w = Self {
            objectness: Linear::init(d, 1, derive_seed(seed, 1)),
            class: Linear::init(d, CLASSES.len(), derive_seed(seed, 2)),
            box_reg: Linear::init(d, 8, derive_seed(seed, 3)),
        };
        // Start from a car-sized box facing +x.
        let car = [3.9f64.ln(), 1.6f64.ln(), 1.56f64.ln()];
        for (k, v) in car.iter().enumerate() {
            w.box_reg.bias[3 + k] = T::lit(*v);
        }
        w.box_reg.bias[7] = T::one();
        w
    }

    pub fn d_model(&self) -> usize {
        self.objectness.in_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.objectness.validate("objectness head")?;
        self.class.validate("class head")?;
        self.box_reg.validate("box head")
    }
}

impl<T: Real> ParamSet<T> for HeadWeights<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.objectness.visit(&join(prefix, "objectness"), f);
        self.class.visit(&join(prefix, "class"), f);
        self.box_reg.visit(&join(prefix, "box_reg"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.objectness.visit_mut(&join(prefix, "objectness"), f);
        self.class.visit_mut(&join(prefix, "class"), f);
        self.box_reg.visit_mut(&join(prefix, "box_reg"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection<T> {
    pub class: usize,
    pub bbox: Box7<T>,
    pub score: T,
}

impl<T: Real> Detection<T> {
    pub fn class_name(&self) -> &'static str {
        CLASSES[self.class]
    }
}

/// Decodes one query feature at proto-center `center` into a detection.
pub fn predict<T: Real>(feature: &[T], center: &[T; 3], w: &HeadWeights<T>) -> Result<Detection<T>> {
    let score = sigmoid(w.objectness.forward(feature)[0]);
    let logits = w.class.forward(feature);
    let class = logits
        .iter()
        .enumerate()
        .fold(0, |best, (k, v)| if *v > logits[best] { k } else { best });
    let r = w.box_reg.forward(feature);
    let enc = BoxEncoding {
        center: [center[0] + r[0], center[1] + r[1], center[2] + r[2]],
        log_dims: [r[3], r[4], r[5]],
        yaw: [r[6], r[7]],
    };
    Ok(Detection {
        class,
        bbox: decode_box(&enc)?,
        score,
    })
}
