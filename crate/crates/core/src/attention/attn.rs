//! Multi-head cross-attention with a binned relative-position bias.

use rand::Rng;

use super::tokens::TokenBank;
use crate::error::{Error, Result};
use crate::nn::{masked_softmax_ordered, Linear};
use crate::weights::{join, ParamSet};
use crate::{rng, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig<T> {
    pub heads: usize,
    pub d_model: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub bias_bins: usize,
    pub bias_range: T,
    pub k_voxel: usize,
    pub k_point: usize,
}

impl<T: Real> Default for AttentionConfig<T> {
    fn default() -> Self {
        Self {
            heads: 4,
            d_model: 128,
            layers: 3,
            ffn_dim: 256,
            bias_bins: 15,
            bias_range: T::lit(4.0),
            k_voxel: 16,
            k_point: 32,
        }
    }
}

impl<T: Real> AttentionConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid("heads", format!("d_model {} not divisible by {}", self.d_model, self.heads)));
        }
        for (name, v) in [
            ("layers", self.layers),
            ("ffn_dim", self.ffn_dim),
            ("bias_bins", self.bias_bins),
            ("k_voxel", self.k_voxel),
            ("k_point", self.k_point),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be at least 1"));
            }
        }
        if !(self.bias_range > T::zero()) {
            return Err(Error::invalid("bias_range", "must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn table_len(&self) -> usize {
        self.bias_bins.pow(3) * self.heads
    }
}

/// Per-axis bin of `Δ ∈ [−R, R)` (clamped), and the table row of a 3D offset.
pub fn bias_row<T: Real>(q_pos: &[T; 3], k_pos: &[T; 3], bins: usize, range: T) -> usize {
    let n = T::from_usize_lossy(bins);
    let mut row = 0usize;
    for a in 0..3 {
        let t = ((k_pos[a] - q_pos[a] + range) / (range + range) * n).floor();
        let b = if t < T::zero() {
            0
        } else {
            t.to_usize().unwrap_or(bins - 1).min(bins - 1)
        };
        row = row * bins + b;
    }
    row
}

/// Learned bias for head `h` between a query and a key position.
pub fn relative_bias<T: Real>(q_pos: &[T; 3], k_pos: &[T; 3], table: &[T], head: usize, cfg: &AttentionConfig<T>) -> T {
    table[bias_row(q_pos, k_pos, cfg.bias_bins, cfg.bias_range) * cfg.heads + head]
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams<T> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub bias_table: Vec<T>,
}

impl<T: Real> AttnParams<T> {
    pub fn zeros(cfg: &AttentionConfig<T>) -> Self {
        let d = cfg.d_model;
        Self {
            wq: Linear::zeros(d, d),
            wk: Linear::zeros(d, d),
            wv: Linear::zeros(d, d),
            wo: Linear::zeros(d, d),
            bias_table: vec![T::zero(); cfg.table_len()],
        }
    }

    /// Identity projections and a zero bias table.
    pub fn identity(cfg: &AttentionConfig<T>) -> Self {
        let d = cfg.d_model;
        Self {
            wq: Linear::identity(d, d),
            wk: Linear::identity(d, d),
            wv: Linear::identity(d, d),
            wo: Linear::identity(d, d),
            bias_table: vec![T::zero(); cfg.table_len()],
        }
    }

    pub fn init(cfg: &AttentionConfig<T>, seed: u64) -> Self {
        use crate::rng::derive_seed;
        let d = cfg.d_model;
        let mut r = rng::seeded(derive_seed(seed, 5));
        Self {
            wq: Linear::init(d, d, derive_seed(seed, 1)),
            wk: Linear::init(d, d, derive_seed(seed, 2)),
            wv: Linear::init(d, d, derive_seed(seed, 3)),
            wo: Linear::init(d, d, derive_seed(seed, 4)),
            bias_table: (0..cfg.table_len()).map(|_| T::lit(r.gen_range(-0.1..0.1))).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &Linear<T>| Linear::zeros(l.in_dim, l.out_dim);
        Self {
            wq: z(&self.wq),
            wk: z(&self.wk),
            wv: z(&self.wv),
            wo: z(&self.wo),
            bias_table: vec![T::zero(); self.bias_table.len()],
        }
    }
}

impl<T: Real> ParamSet<T> for AttnParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.wq.visit(&join(prefix, "wq"), f);
        self.wk.visit(&join(prefix, "wk"), f);
        self.wv.visit(&join(prefix, "wv"), f);
        self.wo.visit(&join(prefix, "wo"), f);
        f(&join(prefix, "bias_table"), &[self.bias_table.len()], &self.bias_table);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.wq.visit_mut(&join(prefix, "wq"), f);
        self.wk.visit_mut(&join(prefix, "wk"), f);
        self.wv.visit_mut(&join(prefix, "wv"), f);
        self.wo.visit_mut(&join(prefix, "wo"), f);
        let n = self.bias_table.len();
        f(&join(prefix, "bias_table"), &[n], &mut self.bias_table);
    }
}

/// Forward state of one query's attention.
#[derive(Debug, Clone)]
pub struct AttendCache<T> {
    q_in: Vec<T>,
    k_in: Vec<Vec<T>>,
    q: Vec<T>,
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    /// `probs[h][j]`.
    probs: Vec<Vec<T>>,
    rows: Vec<usize>,
    mask: Vec<bool>,
    heads_out: Vec<T>,
    live: bool,
}

impl<T> AttendCache<T> {
    /// Attention weights, `probs()[h][j]` for head `h` and bank slot `j`.
    pub fn probs(&self) -> &[Vec<T>] {
        &self.probs
    }
}

/// Bank slots sorted by mask, position and features. Sums over keys run in
/// this order, so a permuted bank gives bit-identical outputs.
pub fn canonical_order<T: Real>(bank: &TokenBank<T>) -> Vec<usize> {
    let keys: Vec<Vec<f64>> = (0..bank.len())
        .map(|j| bank.positions[j].iter().chain(bank.feature(j)).map(|v| v.to_f64_lossy()).collect())
        .collect();
    let mut order: Vec<usize> = (0..bank.len()).collect();
    order.sort_by(|&a, &b| {
        bank.mask[b].cmp(&bank.mask[a]).then_with(|| {
            keys[a]
                .iter()
                .zip(&keys[b])
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    order
}

/// One query against its key/value inputs (already normalized).
/// A query whose bank has no valid slot outputs the zero vector.
pub fn attend<T: Real>(
    q_in: &[T],
    q_pos: &[T; 3],
    kv_in: &[Vec<T>],
    bank: &TokenBank<T>,
    params: &AttnParams<T>,
    cfg: &AttentionConfig<T>,
) -> (Vec<T>, AttendCache<T>) {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let m = bank.len();
    let live = bank.mask.iter().any(|v| *v);
    let q = params.wq.forward(q_in);
    let empty = vec![T::zero(); d];
    let (mut k, mut v) = (Vec::with_capacity(m), Vec::with_capacity(m));
    for j in 0..m {
        if bank.mask[j] {
            k.push(params.wk.forward(&kv_in[j]));
            v.push(params.wv.forward(&kv_in[j]));
        } else {
            k.push(empty.clone());
            v.push(empty.clone());
        }
    }
    let rows: Vec<usize> = bank
        .positions
        .iter()
        .map(|p| bias_row(q_pos, p, cfg.bias_bins, cfg.bias_range))
        .collect();
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let order = canonical_order(bank);
    let mut probs = Vec::with_capacity(cfg.heads);
    let mut heads_out = vec![T::zero(); d];
    for h in 0..cfg.heads {
        let hs = h * dh..(h + 1) * dh;
        let logits: Vec<T> = (0..m)
            .map(|j| {
                if !bank.mask[j] {
                    return T::neg_infinity();
                }
                let dot = q[hs.clone()].iter().zip(&k[j][hs.clone()]).map(|(a, b)| *a * *b).sum::<T>();
                dot * scale + params.bias_table[rows[j] * cfg.heads + h]
            })
            .collect();
        let p = masked_softmax_ordered(&logits, &bank.mask, &order);
        for &j in &order {
            if p[j] == T::zero() {
                continue;
            }
            for (o, val) in heads_out[hs.clone()].iter_mut().zip(&v[j][hs.clone()]) {
                *o += p[j] * *val;
            }
        }
        probs.push(p);
    }
    let out = if live {
        params.wo.forward(&heads_out)
    } else {
        vec![T::zero(); d]
    };
    (
        out,
        AttendCache {
            q_in: q_in.to_vec(),
            k_in: kv_in.to_vec(),
            q,
            k,
            v,
            probs,
            rows,
            mask: bank.mask.clone(),
            heads_out,
            live,
        },
    )
}

/// Backward of [`attend`]: accumulates into `grads`, returns gradients for
/// the query input and for every key/value input row.
pub fn attend_backward<T: Real>(
    cache: &AttendCache<T>,
    g_out: &[T],
    params: &AttnParams<T>,
    cfg: &AttentionConfig<T>,
    grads: &mut AttnParams<T>,
) -> (Vec<T>, Vec<Vec<T>>) {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let m = cache.mask.len();
    let mut g_kv_in = vec![vec![T::zero(); d]; m];
    if !cache.live {
        return (vec![T::zero(); d], g_kv_in);
    }
    let g_heads = params.wo.backward(&cache.heads_out, g_out, &mut grads.wo);
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut gq = vec![T::zero(); d];
    let mut gk = vec![vec![T::zero(); d]; m];
    let mut gv = vec![vec![T::zero(); d]; m];
    for h in 0..cfg.heads {
        let hs = h * dh..(h + 1) * dh;
        let p = &cache.probs[h];
        let go = &g_heads[hs.clone()];
        let mut gp = vec![T::zero(); m];
        for j in 0..m {
            if !cache.mask[j] {
                continue;
            }
            gp[j] = go.iter().zip(&cache.v[j][hs.clone()]).map(|(a, b)| *a * *b).sum();
            for (g, o) in gv[j][hs.clone()].iter_mut().zip(go) {
                *g += p[j] * *o;
            }
        }
        let dotp = (0..m).map(|j| p[j] * gp[j]).sum::<T>();
        for j in 0..m {
            if !cache.mask[j] {
                continue;
            }
            let gs = p[j] * (gp[j] - dotp);
            if gs == T::zero() {
                continue;
            }
            grads.bias_table[cache.rows[j] * cfg.heads + h] += gs;
            for t in hs.clone() {
                gq[t] += gs * scale * cache.k[j][t];
                gk[j][t] += gs * scale * cache.q[t];
            }
        }
    }
    let g_q_in = params.wq.backward(&cache.q_in, &gq, &mut grads.wq);
    for j in 0..m {
        if !cache.mask[j] {
            continue;
        }
        let a = params.wk.backward(&cache.k_in[j], &gk[j], &mut grads.wk);
        let b = params.wv.backward(&cache.k_in[j], &gv[j], &mut grads.wv);
        for t in 0..d {
            g_kv_in[j][t] = a[t] + b[t];
        }
    }
    (g_q_in, g_kv_in)
}

/// Attention of each query over a bank. `banks` holds either one bank
/// shared by all queries or one bank per query.
pub fn cross_attention<T: Real>(
    queries: &[Vec<T>],
    q_pos: &[[T; 3]],
    banks: &[TokenBank<T>],
    params: &AttnParams<T>,
    cfg: &AttentionConfig<T>,
) -> Result<Vec<Vec<T>>> {
    cfg.validate()?;
    check_banks(queries.len(), q_pos.len(), banks, cfg.d_model)?;
    Ok(queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let bank = if banks.len() == 1 { &banks[0] } else { &banks[i] };
            let kv: Vec<Vec<T>> = (0..bank.len()).map(|j| bank.feature(j).to_vec()).collect();
            attend(q, &q_pos[i], &kv, bank, params, cfg).0
        })
        .collect())
}

pub(crate) fn check_banks<T: Real>(n_queries: usize, n_pos: usize, banks: &[TokenBank<T>], d: usize) -> Result<()> {
    if n_pos != n_queries {
        return Err(Error::shape("query positions", n_queries, n_pos));
    }
    if !(banks.len() == 1 || banks.len() == n_queries) {
        return Err(Error::shape("token banks", format!("1 or {n_queries}"), banks.len()));
    }
    if let Some(b) = banks.iter().find(|b| b.width != d) {
        return Err(Error::shape("bank width", d, b.width));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> AttentionConfig<f64> {
        AttentionConfig {
            heads: 2,
            d_model: 4,
            layers: 1,
            ffn_dim: 8,
            bias_bins: 5,
            bias_range: 2.0,
            k_voxel: 2,
            k_point: 2,
        }
    }

    #[test]
    fn bias_center_bin_and_clamp() {
        let c = cfg();
        let row = bias_row(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], c.bias_bins, c.bias_range);
        assert_eq!(row, (2 * 5 + 2) * 5 + 2);
        let far = bias_row(&[0.0; 3], &[100.0, -100.0, 0.0], c.bias_bins, c.bias_range);
        assert_eq!(far, (4 * 5) * 5 + 2);
        assert_eq!(relative_bias(&[0.0; 3], &[1.0; 3], &vec![0.0; c.table_len()], 1, &c), 0.0);
    }

    #[test]
    fn single_key_returns_value() {
        let c = cfg();
        let mut bank = TokenBank::empty(4);
        bank.push([0.0; 3], &[0.5, -1.0, 2.0, 3.0], true);
        bank.push([0.0; 3], &[9.0; 4], false);
        let out = cross_attention(&[vec![1.0, 2.0, 3.0, 4.0]], &[[0.0; 3]], &[bank], &AttnParams::identity(&c), &c).unwrap();
        assert_eq!(out[0], vec![0.5, -1.0, 2.0, 3.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let c = cfg();
        let mut p = AttnParams::identity(&c);
        p.wv = Linear::init(4, 4, 3);
        let mut bank = TokenBank::empty(4);
        for _ in 0..3 {
            bank.push([0.0; 3], &[1.0, 0.0, -1.0, 0.5], true);
        }
        let out = cross_attention(&[vec![0.3, 0.1, 0.0, 2.0]], &[[0.0; 3]], &[bank], &p, &c).unwrap();
        let v = p.wv.forward(&[1.0, 0.0, -1.0, 0.5]);
        for t in 0..4 {
            assert!((out[0][t] - v[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_masked_bank_gives_zero() {
        let c = cfg();
        let bank = TokenBank::from_tokens(&[], 4, 3).unwrap();
        let out = cross_attention(&[vec![1.0; 4]], &[[0.0; 3]], &[bank], &AttnParams::init(&c, 1), &c).unwrap();
        assert_eq!(out[0], vec![0.0; 4]);
    }
}
