//! Dense building blocks with explicit backward passes.

use rand::Rng;

use crate::error::{Error, Result};
use crate::weights::{join, ParamSet};
use crate::{rng, Real};

/// `y = W x + b`, with `W` stored row-major as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
        }
    }

    /// Uniform in `±1/√in_dim`.
    pub fn init(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let mut draw = || T::lit(rng.gen_range(-bound..=bound));
        Self {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim).map(|_| draw()).collect(),
            bias: (0..out_dim).map(|_| draw()).collect(),
        }
    }

    /// Identity on the first `min(in, out)` coordinates, zero bias.
    pub fn identity(in_dim: usize, out_dim: usize) -> Self {
        let mut l = Self::zeros(in_dim, out_dim);
        for i in 0..in_dim.min(out_dim) {
            l.weight[i * in_dim + i] = T::one();
        }
        l
    }

    #[inline]
    pub fn w(&self, o: usize, i: usize) -> T {
        self.weight[o * self.in_dim + i]
    }

    pub fn check_input(&self, x: &[T], context: &'static str) -> Result<()> {
        if x.len() != self.in_dim {
            return Err(Error::shape(context, self.in_dim, x.len()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks_exact(self.in_dim.max(1))
            .zip(&self.bias)
            .map(|(row, b)| *b + row.iter().zip(x).map(|(w, v)| *w * *v).sum::<T>())
            .take(self.out_dim)
            .collect()
    }

    /// Accumulates parameter gradients into `grads` and returns `∂L/∂x`.
    pub fn backward(&self, x: &[T], gy: &[T], grads: &mut Linear<T>) -> Vec<T> {
        let mut gx = vec![T::zero(); self.in_dim];
        for o in 0..self.out_dim {
            let g = gy[o];
            if g == T::zero() {
                continue;
            }
            grads.bias[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grads.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                gx[i] += g * row[i];
            }
        }
        gx
    }

    pub fn validate(&self, context: &'static str) -> Result<()> {
        if self.weight.len() != self.in_dim * self.out_dim || self.bias.len() != self.out_dim {
            return Err(Error::shape(context, self.in_dim * self.out_dim, self.weight.len()));
        }
        if self.weight.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::invalid("weights", format!("non-finite value in {context}")));
        }
        Ok(())
    }
}

impl<T: Real> ParamSet<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        f(&join(prefix, "weight"), &[self.out_dim, self.in_dim], &self.weight);
        f(&join(prefix, "bias"), &[self.out_dim], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        f(&join(prefix, "weight"), &[self.out_dim, self.in_dim], &mut self.weight);
        f(&join(prefix, "bias"), &[self.out_dim], &mut self.bias);
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-token mean/variance normalization with learned scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Saved statistics for [`LayerNorm::backward`].
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    inv_std: T,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: vec![T::one(); dim],
            beta: vec![T::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &[T]) -> (Vec<T>, LayerNormCache<T>) {
        let n = T::from_usize_lossy(x.len());
        let mean = x.iter().copied().sum::<T>() / n;
        let var = x.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
        let inv_std = T::one() / (var + T::lit(LAYER_NORM_EPS)).sqrt();
        let xhat: Vec<T> = x.iter().map(|v| (*v - mean) * inv_std).collect();
        let y = xhat
            .iter()
            .zip(self.gamma.iter().zip(&self.beta))
            .map(|(h, (g, b))| *h * *g + *b)
            .collect();
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, gy: &[T], grads: &mut LayerNorm<T>) -> Vec<T> {
        let d = gy.len();
        let n = T::from_usize_lossy(d);
        let mut gxhat = vec![T::zero(); d];
        for i in 0..d {
            grads.gamma[i] += gy[i] * cache.xhat[i];
            grads.beta[i] += gy[i];
            gxhat[i] = gy[i] * self.gamma[i];
        }
        let sum_g = gxhat.iter().copied().sum::<T>();
        let sum_gx = gxhat.iter().zip(&cache.xhat).map(|(g, h)| *g * *h).sum::<T>();
        (0..d)
            .map(|i| cache.inv_std / n * (n * gxhat[i] - sum_g - cache.xhat[i] * sum_gx))
            .collect()
    }
}

impl<T: Real> ParamSet<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        f(&join(prefix, "gamma"), &[self.dim()], &self.gamma);
        f(&join(prefix, "beta"), &[self.dim()], &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        let d = self.dim();
        f(&join(prefix, "gamma"), &[d], &mut self.gamma);
        f(&join(prefix, "beta"), &[d], &mut self.beta);
    }
}

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    T::lit(0.5) * x * (T::one() + (x * T::FRAC_1_SQRT_2()).erf())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::FRAC_1_SQRT_2()).erf());
    let pdf = (-(x * x) / T::lit(2.0)).exp() / (T::TAU()).sqrt();
    cdf + x * pdf
}

/// Numerically stable softmax over the unmasked entries; masked entries and
/// fully masked rows come out as 0.
pub fn masked_softmax<T: Real>(logits: &[T], mask: &[bool]) -> Vec<T> {
    let order: Vec<usize> = (0..logits.len()).collect();
    masked_softmax_ordered(logits, mask, &order)
}

/// [`masked_softmax`] with the normalizer summed in `order`.
pub fn masked_softmax_ordered<T: Real>(logits: &[T], mask: &[bool], order: &[usize]) -> Vec<T> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(l, _)| *l)
        .fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return vec![T::zero(); logits.len()];
    }
    let mut out: Vec<T> = logits
        .iter()
        .zip(mask)
        .map(|(l, m)| if *m { (*l - max).exp() } else { T::zero() })
        .collect();
    let total = order.iter().map(|&j| out[j]).sum::<T>();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_backward_matches_definition() {
        let l = Linear::<f64>::init(3, 2, 4);
        let x = [0.3, -1.2, 2.0];
        let y = l.forward(&x);
        for o in 0..2 {
            let want = l.bias[o] + (0..3).map(|i| l.w(o, i) * x[i]).sum::<f64>();
            assert!((y[o] - want).abs() < 1e-15);
        }
        let mut g = Linear::zeros(3, 2);
        let gx = l.backward(&x, &[1.0, 0.0], &mut g);
        assert_eq!(gx, vec![l.w(0, 0), l.w(0, 1), l.w(0, 2)]);
        assert_eq!(&g.weight[..3], &x);
    }

    #[test]
    fn layer_norm_unit_stats() {
        let ln = LayerNorm::<f64>::new(4);
        let (y, _) = ln.forward(&[1.0, 2.0, 3.0, 4.0]);
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.25 / (1.25 + 1e-5)).abs() < 1e-9);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_344_746_068_543).abs() < 1e-12);
        let h = 1e-6;
        for x in [-2.0, -0.3, 0.0, 0.7, 3.0f64] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_masks_and_degenerates() {
        let p = masked_softmax(&[1.0f64, 2.0, 1000.0], &[true, true, false]);
        assert_eq!(p[2], 0.0);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-15);
        assert_eq!(masked_softmax(&[1.0f64, 2.0], &[false, false]), vec![0.0, 0.0]);
    }
}
