use fusiondet_core::attention::block::{query_forward, transformer_backward_shared};
use fusiondet_core::attention::{
    bias_row, cross_attention, transformer_forward, AttentionConfig, AttnParams, BlockWeights, TokenBank,
    TransformerWeights,
};
use fusiondet_core::gradcheck::{check_params, check_vector, DEFAULT_FLOOR, DEFAULT_STEP};
use fusiondet_core::nn::Linear;
use fusiondet_core::rng;
use fusiondet_core::weights::ParamSet;
use proptest::prelude::*;
use rand::Rng;

fn cfg(heads: usize, d: usize, layers: usize) -> AttentionConfig<f64> {
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

fn perturb<P: ParamSet<f64>>(p: &mut P, seed: u64, amp: f64) {
    let mut r = rng::seeded(seed);
    p.visit_mut("", &mut |_, _, v| v.iter_mut().for_each(|x| *x += r.gen_range(-amp..amp)));
}

fn matvec(l: &Linear<f64>, x: &[f64]) -> Vec<f64> {
    (0..l.out_dim)
        .map(|o| l.bias[o] + (0..l.in_dim).map(|i| l.weight[o * l.in_dim + i] * x[i]).sum::<f64>())
        .collect()
}

/// Textbook multi-head attention with explicit exp/normalize.
fn attention_oracle(q_in: &[f64], q_pos: &[f64; 3], bank: &TokenBank<f64>, kv: &[Vec<f64>], p: &AttnParams<f64>, c: &AttentionConfig<f64>) -> Vec<f64> {
    let dh = c.d_model / c.heads;
    let q = matvec(&p.wq, q_in);
    let mut cat = vec![0.0; c.d_model];
    if !bank.mask.iter().any(|m| *m) {
        return cat;
    }
    for h in 0..c.heads {
        let mut w = Vec::new();
        for j in 0..bank.len() {
            if !bank.mask[j] {
                w.push(0.0);
                continue;
            }
            let k = matvec(&p.wk, &kv[j]);
            let s: f64 = (0..dh).map(|t| q[h * dh + t] * k[h * dh + t]).sum::<f64>() / ((c.d_model / c.heads) as f64).sqrt();
            let b = p.bias_table[bias_row(q_pos, &bank.positions[j], c.bias_bins, c.bias_range) * c.heads + h];
            w.push((s + b).exp());
        }
        let z: f64 = w.iter().sum();
        for j in 0..bank.len() {
            if !bank.mask[j] {
                continue;
            }
            let v = matvec(&p.wv, &kv[j]);
            for t in 0..dh {
                cat[h * dh + t] += w[j] / z * v[h * dh + t];
            }
        }
    }
    matvec(&p.wo, &cat)
}

fn ln_oracle(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * gamma[i] + beta[i])
        .collect()
}

fn gelu_oracle(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[test]
fn cross_attention_matches_softmax_oracle() {
    let c = cfg(2, 8, 1);
    let mut r = rng::seeded(11);
    let params = AttnParams::init(&c, 3);
    let bank = random_bank(&mut r, 5, 8, &[]);
    let kv: Vec<Vec<f64>> = (0..5).map(|j| bank.feature(j).to_vec()).collect();
    let qs: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut r, 8)).collect();
    let pos: Vec<[f64; 3]> = (0..3).map(|_| [r.gen_range(-1.0..1.0), 0.0, 0.0]).collect();
    let got = cross_attention(&qs, &pos, std::slice::from_ref(&bank), &params, &c).unwrap();
    for i in 0..3 {
        let want = attention_oracle(&qs[i], &pos[i], &bank, &kv, &params, &c);
        for (a, b) in got[i].iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn single_block_matches_composed_oracle() {
    let c = cfg(2, 8, 1);
    let mut r = rng::seeded(12);
    let mut w = TransformerWeights::init(&c, 4);
    perturb(&mut w, 5, 0.2);
    let bank = random_bank(&mut r, 6, 8, &[2]);
    let x = random_vec(&mut r, 8);
    let pos = [0.3, -0.2, 0.1];
    let got = transformer_forward(std::slice::from_ref(&x), &[pos], std::slice::from_ref(&bank), &w, &c).unwrap();

    let b: &BlockWeights<f64> = &w.blocks[0];
    let qn = ln_oracle(&x, &b.ln_q.gamma, &b.ln_q.beta);
    let kv: Vec<Vec<f64>> = (0..bank.len())
        .map(|j| ln_oracle(bank.feature(j), &b.ln_kv.gamma, &b.ln_kv.beta))
        .collect();
    let a = attention_oracle(&qn, &pos, &bank, &kv, &b.attn, &c);
    let x1: Vec<f64> = x.iter().zip(&a).map(|(u, v)| u + v).collect();
    let h: Vec<f64> = matvec(&b.ffn1, &ln_oracle(&x1, &b.ln_ffn.gamma, &b.ln_ffn.beta))
        .into_iter()
        .map(gelu_oracle)
        .collect();
    let f = matvec(&b.ffn2, &h);
    for (k, (g, (u, v))) in got[0].iter().zip(x1.iter().zip(&f)).enumerate() {
        assert!((g - (u + v)).abs() < 1e-5, "coord {k}");
    }
}

#[test]
fn pass_through_stack_is_identity() {
    let c = cfg(4, 8, 3);
    let mut r = rng::seeded(13);
    let bank = random_bank(&mut r, 5, 8, &[0]);
    let qs: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut r, 8)).collect();
    let pos = vec![[0.0; 3]; 4];
    let out = transformer_forward(&qs, &pos, &[bank], &TransformerWeights::pass_through(&c), &c).unwrap();
    assert_eq!(out, qs);
}

#[test]
fn dead_bank_gives_zero_attention() {
    let c = cfg(2, 4, 1);
    let mut r = rng::seeded(14);
    let bank = random_bank(&mut r, 3, 4, &[0, 1, 2]);
    let out = cross_attention(&[vec![1.0, 2.0, 3.0, 4.0]], &[[0.0; 3]], &[bank], &AttnParams::init(&c, 1), &c).unwrap();
    assert_eq!(out[0], vec![0.0; 4]);
}

#[test]
fn stack_gradients_match_finite_differences() {
    let c = cfg(2, 8, 2);
    let mut r = rng::seeded(15);
    let mut w = TransformerWeights::init(&c, 6);
    perturb(&mut w, 7, 0.3);
    let bank = random_bank(&mut r, 8, 8, &[5]);
    let qs: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut r, 8)).collect();
    let pos: Vec<[f64; 3]> = (0..4).map(|_| [r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), 0.0]).collect();
    let readout: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut r, 8)).collect();

    let loss = |w: &TransformerWeights<f64>, qs: &[Vec<f64>], bank: &TokenBank<f64>| -> f64 {
        let out = transformer_forward(qs, &pos, std::slice::from_ref(bank), w, &c).unwrap();
        out.iter().zip(&readout).map(|(o, g)| o.iter().zip(g).map(|(a, b)| a * b).sum::<f64>()).sum()
    };
    let grads = transformer_backward_shared(&qs, &pos, &bank, &w, &c, &readout);

    let reports = check_params(&w, &grads.weights, |p| loss(p, &qs, &bank), 100, DEFAULT_STEP, DEFAULT_FLOOR);
    assert!(reports.len() >= 2 * 14);
    for rep in &reports {
        assert!(rep.passes(1e-4), "{rep:?}");
    }

    let flat_q: Vec<f64> = qs.concat();
    let g_q: Vec<f64> = grads.queries.concat();
    let rep = check_vector(
        "queries",
        |v| loss(&w, &v.chunks(8).map(|c| c.to_vec()).collect::<Vec<_>>(), &bank),
        &flat_q,
        &g_q,
        100,
        DEFAULT_STEP,
        DEFAULT_FLOOR,
    );
    assert!(rep.passes(1e-4), "{rep:?}");

    let mut probe = bank.clone();
    let rep = check_vector(
        "bank",
        |v| {
            probe.features.copy_from_slice(v);
            loss(&w, &qs, &probe)
        },
        &bank.features,
        &grads.bank,
        100,
        DEFAULT_STEP,
        DEFAULT_FLOOR,
    );
    assert!(rep.passes(1e-4), "{rep:?}");
    assert!(grads.bank[5 * 8..6 * 8].iter().all(|g| *g == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_convex_and_permutation_equivariant(seed in any::<u64>(), n in 1usize..7) {
        let c = cfg(1, 4, 1);
        let mut r = rng::seeded(seed);
        let bank = random_bank(&mut r, n, 4, &[]);
        let q = random_vec(&mut r, 4);
        let params = AttnParams::identity(&c);
        let out = cross_attention(std::slice::from_ref(&q), &[[0.0; 3]], std::slice::from_ref(&bank), &params, &c).unwrap();
        for t in 0..4 {
            let col: Vec<f64> = (0..n).map(|j| bank.feature(j)[t]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out[0][t] >= lo - 1e-12 && out[0][t] <= hi + 1e-12);
        }

        let c = cfg(2, 8, 2);
        let w = TransformerWeights::init(&c, seed);
        let bank = random_bank(&mut r, n, 8, &[0]);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        perm.rotate_left(n / 2);
        let mut shuffled = TokenBank::empty(8);
        for &j in &perm {
            shuffled.push(bank.positions[j], bank.feature(j), bank.mask[j]);
        }
        let qs: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut r, 8)).collect();
        let pos = vec![[0.5, 0.5, 0.0]; 3];
        let a = transformer_forward(&qs, &pos, std::slice::from_ref(&bank), &w, &c).unwrap();
        let b = transformer_forward(&qs, &pos, &[shuffled], &w, &c).unwrap();
        prop_assert_eq!(&a, &b);
        // Each query's output depends only on itself and the bank.
        let solo = query_forward(&qs[1], &pos[1], &bank, &w, &c).0;
        prop_assert_eq!(&solo, &a[1]);
    }
}
