//! Pre-LN cross-attention blocks and their backward pass.

use super::attn::{attend, attend_backward, check_banks, AttendCache, AttentionConfig, AttnParams};
use super::tokens::TokenBank;
use crate::error::Result;
use crate::nn::{gelu, gelu_grad, LayerNorm, LayerNormCache, Linear};
use crate::weights::{join, ParamSet};
use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub ln_q: LayerNorm<T>,
    pub ln_kv: LayerNorm<T>,
    pub attn: AttnParams<T>,
    pub ln_ffn: LayerNorm<T>,
    pub ffn1: Linear<T>,
    pub ffn2: Linear<T>,
}

impl<T: Real> BlockWeights<T> {
    pub fn init(cfg: &AttentionConfig<T>, seed: u64) -> Self {
        use crate::rng::derive_seed;
        let d = cfg.d_model;
        Self {
            ln_q: LayerNorm::new(d),
            ln_kv: LayerNorm::new(d),
            attn: AttnParams::init(cfg, derive_seed(seed, 1)),
            ln_ffn: LayerNorm::new(d),
            ffn1: Linear::init(d, cfg.ffn_dim, derive_seed(seed, 2)),
            ffn2: Linear::init(cfg.ffn_dim, d, derive_seed(seed, 3)),
        }
    }

    /// Both residual branches output zero: the block is the identity.
    pub fn pass_through(cfg: &AttentionConfig<T>) -> Self {
        let d = cfg.d_model;
        Self {
            ln_q: LayerNorm::new(d),
            ln_kv: LayerNorm::new(d),
            attn: AttnParams::zeros(cfg),
            ln_ffn: LayerNorm::new(d),
            ffn1: Linear::zeros(d, cfg.ffn_dim),
            ffn2: Linear::zeros(cfg.ffn_dim, d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let zl = |l: &LayerNorm<T>| LayerNorm {
            gamma: vec![T::zero(); l.dim()],
            beta: vec![T::zero(); l.dim()],
        };
        Self {
            ln_q: zl(&self.ln_q),
            ln_kv: zl(&self.ln_kv),
            attn: self.attn.zeros_like(),
            ln_ffn: zl(&self.ln_ffn),
            ffn1: Linear::zeros(self.ffn1.in_dim, self.ffn1.out_dim),
            ffn2: Linear::zeros(self.ffn2.in_dim, self.ffn2.out_dim),
        }
    }
}

impl<T: Real> ParamSet<T> for BlockWeights<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.ln_q.visit(&join(prefix, "ln_q"), f);
        self.ln_kv.visit(&join(prefix, "ln_kv"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln_ffn.visit(&join(prefix, "ln_ffn"), f);
        self.ffn1.visit(&join(prefix, "ffn1"), f);
        self.ffn2.visit(&join(prefix, "ffn2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.ln_q.visit_mut(&join(prefix, "ln_q"), f);
        self.ln_kv.visit_mut(&join(prefix, "ln_kv"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln_ffn.visit_mut(&join(prefix, "ln_ffn"), f);
        self.ffn1.visit_mut(&join(prefix, "ffn1"), f);
        self.ffn2.visit_mut(&join(prefix, "ffn2"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights<T> {
    pub blocks: Vec<BlockWeights<T>>,
}

impl<T: Real> TransformerWeights<T> {
    pub fn init(cfg: &AttentionConfig<T>, seed: u64) -> Self {
        Self {
            blocks: (0..cfg.layers)
                .map(|l| BlockWeights::init(cfg, crate::rng::derive_seed(seed, l as u64)))
                .collect(),
        }
    }

    pub fn pass_through(cfg: &AttentionConfig<T>) -> Self {
        Self {
            blocks: (0..cfg.layers).map(|_| BlockWeights::pass_through(cfg)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            blocks: self.blocks.iter().map(BlockWeights::zeros_like).collect(),
        }
    }
}

impl<T: Real> ParamSet<T> for TransformerWeights<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        for (l, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{l}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        for (l, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{l}")), f);
        }
    }
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    ln_q: LayerNormCache<T>,
    ln_kv: Vec<Option<LayerNormCache<T>>>,
    attn: AttendCache<T>,
    ln_ffn: LayerNormCache<T>,
    ffn_in: Vec<T>,
    hidden: Vec<T>,
    act: Vec<T>,
}

/// Per-query activations through all layers.
#[derive(Debug, Clone)]
pub struct QueryCache<T> {
    layers: Vec<LayerCache<T>>,
}

/// `x ← x + Attn(LN_q(x), LN_kv(bank))`, then `x ← x + FFN(LN_ffn(x))`.
fn block_forward<T: Real>(
    x: &[T],
    q_pos: &[T; 3],
    bank: &TokenBank<T>,
    w: &BlockWeights<T>,
    cfg: &AttentionConfig<T>,
) -> (Vec<T>, LayerCache<T>) {
    let (qn, ln_q) = w.ln_q.forward(x);
    let mut kv = Vec::with_capacity(bank.len());
    let mut ln_kv = Vec::with_capacity(bank.len());
    for j in 0..bank.len() {
        if bank.mask[j] {
            let (k, c) = w.ln_kv.forward(bank.feature(j));
            kv.push(k);
            ln_kv.push(Some(c));
        } else {
            kv.push(vec![T::zero(); cfg.d_model]);
            ln_kv.push(None);
        }
    }
    let (a, attn) = attend(&qn, q_pos, &kv, bank, &w.attn, cfg);
    let x1: Vec<T> = x.iter().zip(&a).map(|(u, v)| *u + *v).collect();
    let (ffn_in, ln_ffn) = w.ln_ffn.forward(&x1);
    let hidden = w.ffn1.forward(&ffn_in);
    let act: Vec<T> = hidden.iter().map(|h| gelu(*h)).collect();
    let f = w.ffn2.forward(&act);
    let x2 = x1.iter().zip(&f).map(|(u, v)| *u + *v).collect();
    (
        x2,
        LayerCache {
            ln_q,
            ln_kv,
            attn,
            ln_ffn,
            ffn_in,
            hidden,
            act,
        },
    )
}

fn block_backward<T: Real>(
    cache: &LayerCache<T>,
    g_x2: &[T],
    w: &BlockWeights<T>,
    cfg: &AttentionConfig<T>,
    grads: &mut BlockWeights<T>,
    g_bank: &mut [T],
) -> Vec<T> {
    let d = cfg.d_model;
    let g_act = w.ffn2.backward(&cache.act, g_x2, &mut grads.ffn2);
    let g_hidden: Vec<T> = g_act.iter().zip(&cache.hidden).map(|(g, h)| *g * gelu_grad(*h)).collect();
    let g_ffn_in = w.ffn1.backward(&cache.ffn_in, &g_hidden, &mut grads.ffn1);
    let g_ln = w.ln_ffn.backward(&cache.ln_ffn, &g_ffn_in, &mut grads.ln_ffn);
    let g_x1: Vec<T> = g_x2.iter().zip(&g_ln).map(|(a, b)| *a + *b).collect();

    let (g_qn, g_kv) = attend_backward(&cache.attn, &g_x1, &w.attn, cfg, &mut grads.attn);
    let g_q = w.ln_q.backward(&cache.ln_q, &g_qn, &mut grads.ln_q);
    for (j, c) in cache.ln_kv.iter().enumerate() {
        if let Some(c) = c {
            let g = w.ln_kv.backward(c, &g_kv[j], &mut grads.ln_kv);
            for (dst, v) in g_bank[j * d..(j + 1) * d].iter_mut().zip(g) {
                *dst += v;
            }
        }
    }
    g_x1.iter().zip(&g_q).map(|(a, b)| *a + *b).collect()
}

/// One query through every block.
pub fn query_forward<T: Real>(
    x: &[T],
    q_pos: &[T; 3],
    bank: &TokenBank<T>,
    weights: &TransformerWeights<T>,
    cfg: &AttentionConfig<T>,
) -> (Vec<T>, QueryCache<T>) {
    let mut x = x.to_vec();
    let mut layers = Vec::with_capacity(weights.blocks.len());
    for w in &weights.blocks {
        let (y, c) = block_forward(&x, q_pos, bank, w, cfg);
        layers.push(c);
        x = y;
    }
    (x, QueryCache { layers })
}

/// Backward through every block for one query. Accumulates weight
/// gradients and `∂L/∂bank` (flat, bank layout); returns `∂L/∂x`.
pub fn query_backward<T: Real>(
    cache: &QueryCache<T>,
    g_out: &[T],
    weights: &TransformerWeights<T>,
    cfg: &AttentionConfig<T>,
    grads: &mut TransformerWeights<T>,
    g_bank: &mut [T],
) -> Vec<T> {
    let mut g = g_out.to_vec();
    for (l, c) in cache.layers.iter().enumerate().rev() {
        g = block_backward(c, &g, &weights.blocks[l], cfg, &mut grads.blocks[l], g_bank);
    }
    g
}

/// Runs the stack for every query; `banks` is one shared bank or one per
/// query.
pub fn transformer_forward<T: Real>(
    queries: &[Vec<T>],
    q_pos: &[[T; 3]],
    banks: &[TokenBank<T>],
    weights: &TransformerWeights<T>,
    cfg: &AttentionConfig<T>,
) -> Result<Vec<Vec<T>>> {
    cfg.validate()?;
    check_banks(queries.len(), q_pos.len(), banks, cfg.d_model)?;
    Ok(queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let bank = if banks.len() == 1 { &banks[0] } else { &banks[i] };
            query_forward(q, &q_pos[i], bank, weights, cfg).0
        })
        .collect())
}

/// Gradients of `Σ_i ⟨g_out[i], out[i]⟩` for a shared bank.
pub struct TransformerGrads<T> {
    pub weights: TransformerWeights<T>,
    pub queries: Vec<Vec<T>>,
    pub bank: Vec<T>,
}

pub fn transformer_backward_shared<T: Real>(
    queries: &[Vec<T>],
    q_pos: &[[T; 3]],
    bank: &TokenBank<T>,
    weights: &TransformerWeights<T>,
    cfg: &AttentionConfig<T>,
    g_out: &[Vec<T>],
) -> TransformerGrads<T> {
    let mut grads = TransformerGrads {
        weights: weights.zeros_like(),
        queries: Vec::with_capacity(queries.len()),
        bank: vec![T::zero(); bank.features.len()],
    };
    for (i, q) in queries.iter().enumerate() {
        let (_, cache) = query_forward(q, &q_pos[i], bank, weights, cfg);
        let gq = query_backward(&cache, &g_out[i], weights, cfg, &mut grads.weights, &mut grads.bank);
        grads.queries.push(gq);
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_through_is_identity() {
        let cfg = AttentionConfig {
            heads: 2,
            d_model: 4,
            layers: 2,
            ffn_dim: 6,
            bias_bins: 3,
            bias_range: 1.0,
            k_voxel: 1,
            k_point: 1,
        };
        let mut bank = TokenBank::empty(4);
        bank.push([0.1, 0.0, 0.0], &[1.0, 2.0, 3.0, 4.0], true);
        let q = vec![vec![0.5, -0.5, 1.5, 0.0]];
        let out = transformer_forward(&q, &[[0.0; 3]], &[bank], &TransformerWeights::pass_through(&cfg), &cfg).unwrap();
        assert_eq!(out, q);
    }
}
