//! Sparse 3D tensors and rulebook convolutions.
//!
//! A rulebook lists `(tap, input row, output row)` triples; the forward pass
//! and both gradient passes replay the same list, so every convolution here
//! is a sum over explicit neighbour pairs.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;

use super::voxel::VoxelCoord;
use crate::error::{Error, Result};
use crate::rng;
use crate::Real;

/// Active voxel coordinates with one feature row each.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor3D<T> {
    coords: Vec<VoxelCoord>,
    feats: Vec<T>,
    channels: usize,
    stride: u32,
}

impl<T: Real> SparseTensor3D<T> {
    pub fn new(coords: Vec<VoxelCoord>, feats: Vec<T>, channels: usize, stride: u32) -> Result<Self> {
        if feats.len() != coords.len() * channels {
            return Err(Error::shape(
                "SparseTensor3D::new",
                coords.len() * channels,
                feats.len(),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("stride", "must be positive"));
        }
        let unique: BTreeSet<_> = coords.iter().collect();
        if unique.len() != coords.len() {
            return Err(Error::invalid("coords", "duplicate active site"));
        }
        Ok(Self {
            coords,
            feats,
            channels,
            stride,
        })
    }

    pub fn empty(channels: usize, stride: u32) -> Self {
        Self {
            coords: Vec::new(),
            feats: Vec::new(),
            channels,
            stride,
        }
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    pub fn feats(&self) -> &[T] {
        &self.feats
    }

    pub fn feats_mut(&mut self) -> &mut [T] {
        &mut self.feats
    }

    pub fn feature(&self, i: usize) -> &[T] {
        &self.feats[i * self.channels..(i + 1) * self.channels]
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn map_feats(mut self, f: impl Fn(T) -> T) -> Self {
        self.feats.iter_mut().for_each(|v| *v = f(*v));
        self
    }
}

/// Kernel weights laid out `[tap][in][out]` plus one bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub taps: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn zeros(taps: usize, in_ch: usize, out_ch: usize) -> Self {
        Self {
            taps,
            in_ch,
            out_ch,
            weight: vec![T::zero(); taps * in_ch * out_ch],
            bias: vec![T::zero(); out_ch],
        }
    }

    /// Uniform in `±1/√fan_in`, fan-in being `taps · in_ch`.
    pub fn init_uniform(taps: usize, in_ch: usize, out_ch: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let bound = 1.0 / ((taps * in_ch) as f64).sqrt();
        let mut draw = || T::lit(rng.gen_range(-bound..=bound));
        let weight = (0..taps * in_ch * out_ch).map(|_| draw()).collect();
        let bias = (0..out_ch).map(|_| draw()).collect();
        Self {
            taps,
            in_ch,
            out_ch,
            weight,
            bias,
        }
    }

    #[inline]
    pub fn w(&self, tap: usize, i: usize, o: usize) -> T {
        self.weight[(tap * self.in_ch + i) * self.out_ch + o]
    }

    #[inline]
    pub fn w_mut(&mut self, tap: usize, i: usize, o: usize) -> &mut T {
        &mut self.weight[(tap * self.in_ch + i) * self.out_ch + o]
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.len() != self.taps * self.in_ch * self.out_ch || self.bias.len() != self.out_ch {
            return Err(Error::shape(
                "ConvParams",
                format!("{}x{}x{} weights, {} biases", self.taps, self.in_ch, self.out_ch, self.out_ch),
                format!("{} weights, {} biases", self.weight.len(), self.bias.len()),
            ));
        }
        if self.weight.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::invalid("ConvParams", "non-finite weight"));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Applies the kernel at a single tap to one input row, accumulating
    /// into `out`.
    #[inline]
    pub(crate) fn accumulate(&self, tap: usize, input: &[T], out: &mut [T]) {
        for (i, &x) in input.iter().enumerate() {
            if x == T::zero() {
                continue;
            }
            let row = &self.weight[(tap * self.in_ch + i) * self.out_ch..][..self.out_ch];
            for (o, w) in out.iter_mut().zip(row) {
                *o += *w * x;
            }
        }
    }
}

/// Gradients with the same layout as [`ConvParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Index of a 3×3×3 offset in `{-1, 0, 1}³`.
#[inline]
pub fn tap_index(d: [i32; 3]) -> usize {
    (((d[0] + 1) * 3 + (d[1] + 1)) * 3 + (d[2] + 1)) as usize
}

/// Centre tap of a 3×3×3 kernel.
pub const CENTER_TAP: usize = 13;

fn offsets() -> impl Iterator<Item = [i32; 3]> {
    (-1..=1).flat_map(|dx| (-1..=1).flat_map(move |dy| (-1..=1).map(move |dz| [dx, dy, dz])))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rule {
    pub tap: u16,
    pub input: u32,
    pub output: u32,
}

/// Neighbour pairs for one convolution, plus the output active set.
#[derive(Debug, Clone)]
pub struct Rulebook {
    pub rules: Vec<Rule>,
    pub out_coords: Vec<VoxelCoord>,
    pub out_stride: u32,
}

fn index_of(coords: &[VoxelCoord]) -> HashMap<VoxelCoord, u32> {
    coords.iter().enumerate().map(|(i, c)| (*c, i as u32)).collect()
}

/// Rules for a submanifold 3×3×3 convolution: outputs are exactly the input
/// sites, and only active neighbours contribute.
pub fn submanifold_rules<T: Real>(input: &SparseTensor3D<T>) -> Rulebook {
    let lookup = index_of(&input.coords);
    let mut rules = Vec::new();
    for (o, c) in input.coords.iter().enumerate() {
        for d in offsets() {
            let n = [c[0] + d[0], c[1] + d[1], c[2] + d[2]];
            if let Some(&i) = lookup.get(&n) {
                rules.push(Rule {
                    tap: tap_index(d) as u16,
                    input: i,
                    output: o as u32,
                });
            }
        }
    }
    Rulebook {
        rules,
        out_coords: input.coords.clone(),
        out_stride: input.stride,
    }
}

/// Rules for a 3×3×3 stride-2 convolution. Output sites are the distinct
/// parents `floor(c / 2)`; output `o` reads inputs at `2o + δ`,
/// `δ ∈ {-1, 0, 1}³`.
pub fn strided_rules<T: Real>(input: &SparseTensor3D<T>) -> Rulebook {
    let parents: BTreeSet<VoxelCoord> = input
        .coords
        .iter()
        .map(|c| [c[0].div_euclid(2), c[1].div_euclid(2), c[2].div_euclid(2)])
        .collect();
    let out_coords: Vec<VoxelCoord> = parents.into_iter().collect();
    let lookup = index_of(&input.coords);
    let mut rules = Vec::new();
    for (o, p) in out_coords.iter().enumerate() {
        for d in offsets() {
            let n = [2 * p[0] + d[0], 2 * p[1] + d[1], 2 * p[2] + d[2]];
            if let Some(&i) = lookup.get(&n) {
                rules.push(Rule {
                    tap: tap_index(d) as u16,
                    input: i,
                    output: o as u32,
                });
            }
        }
    }
    Rulebook {
        rules,
        out_coords,
        out_stride: input.stride * 2,
    }
}

fn check_channels<T: Real>(input: &SparseTensor3D<T>, params: &ConvParams<T>) -> Result<()> {
    params.validate()?;
    if params.taps != 27 {
        return Err(Error::shape("sparse conv taps", 27, params.taps));
    }
    if input.channels != params.in_ch {
        return Err(Error::shape("sparse conv input channels", params.in_ch, input.channels));
    }
    Ok(())
}

/// Replays a rulebook: `out[o] = bias + Σ W[tap]ᵀ · in[i]`.
pub fn apply_rules<T: Real>(
    input: &SparseTensor3D<T>,
    params: &ConvParams<T>,
    book: &Rulebook,
) -> SparseTensor3D<T> {
    let n_out = book.out_coords.len();
    let mut feats = Vec::with_capacity(n_out * params.out_ch);
    for _ in 0..n_out {
        feats.extend_from_slice(&params.bias);
    }
    for r in &book.rules {
        let o = r.output as usize;
        let out = &mut feats[o * params.out_ch..(o + 1) * params.out_ch];
        params.accumulate(r.tap as usize, input.feature(r.input as usize), out);
    }
    SparseTensor3D {
        coords: book.out_coords.clone(),
        feats,
        channels: params.out_ch,
        stride: book.out_stride,
    }
}

/// Submanifold convolution: the output active set equals the input's.
pub fn submanifold_conv<T: Real>(input: &SparseTensor3D<T>, params: &ConvParams<T>) -> Result<SparseTensor3D<T>> {
    check_channels(input, params)?;
    Ok(apply_rules(input, params, &submanifold_rules(input)))
}

/// Stride-2 convolution onto the parent sites; output stride doubles.
pub fn strided_conv<T: Real>(input: &SparseTensor3D<T>, params: &ConvParams<T>) -> Result<SparseTensor3D<T>> {
    check_channels(input, params)?;
    Ok(apply_rules(input, params, &strided_rules(input)))
}

/// Backward pass of [`apply_rules`]. Returns parameter gradients and the
/// gradient with respect to the input features.
pub fn rules_backward<T: Real>(
    input: &SparseTensor3D<T>,
    params: &ConvParams<T>,
    book: &Rulebook,
    grad_out: &[T],
) -> (ConvGrads<T>, Vec<T>) {
    let (ci, co) = (params.in_ch, params.out_ch);
    let mut gw = vec![T::zero(); params.weight.len()];
    let mut gb = vec![T::zero(); co];
    let mut gin = vec![T::zero(); input.len() * ci];
    for o in 0..book.out_coords.len() {
        for (b, g) in gb.iter_mut().zip(&grad_out[o * co..(o + 1) * co]) {
            *b += *g;
        }
    }
    for r in &book.rules {
        let (tap, i, o) = (r.tap as usize, r.input as usize, r.output as usize);
        let x = input.feature(i);
        let go = &grad_out[o * co..(o + 1) * co];
        let gi = &mut gin[i * ci..(i + 1) * ci];
        for a in 0..ci {
            let wrow = &params.weight[(tap * ci + a) * co..][..co];
            let gwrow = &mut gw[(tap * ci + a) * co..][..co];
            let mut acc = T::zero();
            for ((w, gwv), g) in wrow.iter().zip(gwrow.iter_mut()).zip(go) {
                *gwv += x[a] * *g;
                acc += *w * *g;
            }
            gi[a] += acc;
        }
    }
    (ConvGrads { weight: gw, bias: gb }, gin)
}
