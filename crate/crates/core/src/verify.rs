//! Self-check suite run by `lisa verify`: the FFT operator against its
//! brute-force oracles, the gradient check, the FFT engine, and the
//! invariants of every module.

use crate::attention_ref::{
    circulant2d_from_kernel, circulant_conv_direct, circulant_from_kernel, sa_four_terms, sa_full,
    sa_full_materialized, Materialized, SAWeights, ToeplitzEmbedding,
};
use crate::container::{decode_tensor, encode_tensor};
use crate::cost::{estimate_flops, CostModel, FftCostMode, OperatorKind};
use crate::error::Result;
use crate::fourier::{circular_convolve, irfft, rfft};
use crate::lisa::{
    extract_query_kernel, lisa_backward, lisa_forward, lisa_forward_saved, lisa_multihead, resize_embeddings,
    CircularEmbeddings, EmbeddingSharing, LiSAAttentionParams, LiSAConfig, TokenLayout,
};
use crate::model::{count_parameters, ModelConfig};
use crate::ndtensor::{contract, l2_normalize, matmul, softmax, Contraction, Tensor};
use crate::random::{normal_tensor, rng_from_seed};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Random single-head instance of the operator.
pub struct Instance {
    pub cfg: LiSAConfig,
    pub qb: Tensor,
    pub kb: Tensor,
    pub v: Tensor,
    pub emb: CircularEmbeddings,
}

pub fn random_instance(layout: TokenLayout, ch: usize, d: usize, rng: &mut ChaCha8Rng) -> Instance {
    let cfg = LiSAConfig::single_head(layout, ch, d).expect("valid instance geometry");
    let n = layout.tokens();
    let qb = l2_normalize(&normal_tensor(&[n, ch], 1.0, rng), 1).expect("rank 2");
    let kb = l2_normalize(&normal_tensor(&[n, ch], 1.0, rng), 1).expect("rank 2");
    let v = normal_tensor(&[n, ch], 1.0, rng);
    let emb = CircularEmbeddings::random_full(&cfg, 0.5, rng);
    Instance { cfg, qb, kb, v, emb }
}

/// The operator evaluated with explicit circulant matrices.
pub fn circulant_reference(s: &Instance) -> Result<Tensor> {
    let (ra, rb) = match s.cfg.layout {
        TokenLayout::Sequence(_) => (circulant_from_kernel(&s.emb.wa)?, circulant_from_kernel(&s.emb.wb)?),
        TokenLayout::Grid(..) => (circulant2d_from_kernel(&s.emb.wa)?, circulant2d_from_kernel(&s.emb.wb)?),
    };
    let m = Materialized {
        ra,
        rb,
        ba: &s.emb.ba,
        bb: &s.emb.bb,
    };
    sa_full_materialized(&s.qb, &s.kb, &s.v, &m)
}

type Outcome = Result<(bool, String)>;

pub fn check_oracle_equivalence(instances: usize, seed: u64) -> Outcome {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for n in [4, 7, 12, 16] {
        for _ in 0..instances {
            let ch = rng.random_range(1..=4);
            let d = rng.random_range(1..=3);
            let s = random_instance(TokenLayout::Sequence(n), ch, d, &mut rng);
            let y = lisa_forward(&s.qb, &s.kb, &s.v, &s.emb, &s.cfg)?;
            worst = worst.max(y.rel_err(&circulant_reference(&s)?)?);
        }
    }
    Ok((worst <= 1e-10, format!("max rel err {worst:.2e} over {} instances", 4 * instances)))
}

pub fn check_decomposition(instances: usize, seed: u64) -> Outcome {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.random_range(1..=8);
        let c = rng.random_range(1..=4);
        let d = rng.random_range(1..=3);
        let qb = l2_normalize(&normal_tensor(&[n, c], 1.0, &mut rng), 1)?;
        let kb = l2_normalize(&normal_tensor(&[n, c], 1.0, &mut rng), 1)?;
        let v = normal_tensor(&[n, c], 1.0, &mut rng);
        let w = SAWeights {
            ea: ToeplitzEmbedding::for_tokens(normal_tensor(&[2 * n - 1, c, d], 1.0, &mut rng), n)?,
            eb: ToeplitzEmbedding::for_tokens(normal_tensor(&[2 * n - 1, d], 1.0, &mut rng), n)?,
            ba: normal_tensor(&[c, d], 1.0, &mut rng),
            bb: normal_tensor(&[c, d], 1.0, &mut rng),
        };
        let full = sa_full(&qb, &kb, &v, &w)?;
        let (a, b, cc, dd) = sa_four_terms(&qb, &kb, &v, &w)?;
        let sum = a.add(&b)?.add(&cc)?.add(&dd)?;
        worst = worst.max(sum.max_abs_diff(&full)?);
    }
    Ok((worst <= 1e-12, format!("max abs diff {worst:.2e} over {instances} instances")))
}

/// Largest `|a - n| / max(|a|, |n|)` over all coordinates of all inputs and
/// parameters; pairs with both magnitudes below `1e-8` compare absolutely.
pub fn gradient_error(s: &Instance, upstream: &Tensor, step: f64) -> Result<f64> {
    let (_, cache) = lisa_forward_saved(&s.qb, &s.kb, &s.v, &s.emb, &s.cfg)?;
    let g = lisa_backward(upstream, &cache)?;
    let loss = |q: &Tensor, k: &Tensor, v: &Tensor, e: &CircularEmbeddings| -> Result<f64> {
        lisa_forward(q, k, v, e, &s.cfg)?.dot(upstream)
    };
    let mut worst: f64 = 0.0;
    let mut probe = |analytic: &Tensor, which: usize| -> Result<()> {
        for idx in 0..analytic.len() {
            let eval = |delta: f64| -> Result<f64> {
                let (mut q, mut k, mut v, mut e) = (s.qb.clone(), s.kb.clone(), s.v.clone(), s.emb.clone());
                let t = match which {
                    0 => &mut q,
                    1 => &mut k,
                    2 => &mut v,
                    3 => &mut e.wa,
                    4 => &mut e.wb,
                    5 => &mut e.ba,
                    _ => &mut e.bb,
                };
                t.data_mut()[idx] += delta;
                loss(&q, &k, &v, &e)
            };
            let num = (eval(step)? - eval(-step)?) / (2.0 * step);
            let a = analytic.data()[idx];
            let scale = a.abs().max(num.abs());
            let e = if scale < 1e-8 { (a - num).abs() } else { (a - num).abs() / scale };
            worst = worst.max(e);
        }
        Ok(())
    };
    for (which, t) in [&g.d_q, &g.d_k, &g.d_v, &g.d_wa, &g.d_wb, &g.d_ba, &g.d_bb].into_iter().enumerate() {
        probe(t, which)?;
    }
    Ok(worst)
}

pub fn check_gradients(instances: usize, seed: u64) -> Outcome {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let layout = if i % 4 == 3 {
            TokenLayout::Grid(rng.random_range(2..=3), rng.random_range(2..=4))
        } else {
            TokenLayout::Sequence(rng.random_range(1..=12))
        };
        let ch = rng.random_range(1..=3);
        let d = rng.random_range(1..=3);
        let s = random_instance(layout, ch, d, &mut rng);
        let u = normal_tensor(&[layout.tokens(), ch], 1.0, &mut rng);
        worst = worst.max(gradient_error(&s, &u, 1e-5)?);
    }
    Ok((worst < 1e-5, format!("max rel err {worst:.2e} over {instances} instances")))
}

pub fn check_fft_roundtrip(max_len: usize, seed: u64) -> Outcome {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for n in 1..=max_len {
        let x = normal_tensor(&[n], 1.0, &mut rng);
        let back = irfft(&rfft(&x, 1)?)?;
        worst = worst.max(back.max_abs_diff(&x)?);
    }
    Ok((worst <= 1e-12, format!("max abs err {worst:.2e} for N in 1..={max_len}")))
}

pub fn check_convolution(cases: usize, seed: u64) -> Outcome {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for i in 0..cases {
        // 1D cases alternate with 2D cases.
        if i % 2 == 0 {
            let n = rng.random_range(1..=64);
            let x = normal_tensor(&[n], 1.0, &mut rng);
            let w = normal_tensor(&[n], 1.0, &mut rng);
            let fast = circular_convolve(&x, &w, 1)?;
            let slow = circulant_conv_direct(&x.clone().reshape(&[n, 1])?, &w)?;
            worst = worst.max(fast.max_abs_diff(&slow.reshape(&[n])?)?);
        } else {
            let (h, w_) = (rng.random_range(1..=8), rng.random_range(1..=8));
            let x = normal_tensor(&[h, w_], 1.0, &mut rng);
            let w = normal_tensor(&[h, w_], 1.0, &mut rng);
            let fast = circular_convolve(&x, &w, 2)?;
            let slow = matmul(&circulant2d_from_kernel(&w)?, &x.clone().reshape(&[h * w_, 1])?)?;
            worst = worst.max(fast.max_abs_diff(&slow.reshape(&[h, w_])?)?);
        }
    }
    Ok((worst <= 1e-10, format!("max abs err {worst:.2e} over {cases} cases")))
}

pub fn check_tensor_invariants(seed: u64) -> Outcome {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x = normal_tensor(&[4, 7], 3.0, &mut rng);
        let shift = rng.random_range(-50.0..50.0);
        worst = worst.max(softmax(&x.map(|v| v + shift), 1)?.max_abs_diff(&softmax(&x, 1)?)?);
        let once = l2_normalize(&x, 1)?;
        worst = worst.max(l2_normalize(&once, 1)?.max_abs_diff(&once)?);
        let (a, b) = (normal_tensor(&[2, 3, 5], 1.0, &mut rng), normal_tensor(&[2, 5, 4], 1.0, &mut rng));
        let fast = contract(&a, &b, Contraction::Batched)?;
        let naive = Tensor::from_fn(&[2, 3, 4], |f| {
            let (g, i, j) = (f / 12, (f / 4) % 3, f % 4);
            (0..5).map(|k| a.at(&[g, i, k]) * b.at(&[g, k, j])).sum()
        });
        worst = worst.max(fast.max_abs_diff(&naive)?);
    }
    Ok((worst <= 1e-12, format!("max deviation {worst:.2e}")))
}

pub fn check_fourier_invariants(seed: u64) -> Outcome {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for n in [5, 12, 31, 64, 196] {
        let x = normal_tensor(&[n], 1.0, &mut rng);
        let y = normal_tensor(&[n], 1.0, &mut rng);
        let (a, b) = (0.7, -1.3);
        let lhs = rfft(&x.scale(a).add(&y.scale(b))?, 1)?;
        let (sx, sy) = (rfft(&x, 1)?, rfft(&y, 1)?);
        for ((l, u), v) in lhs.values().iter().zip(sx.values()).zip(sy.values()) {
            worst = worst.max((l - (u * a + v * b)).norm() / n as f64);
        }
        let energy = x.dot(&x)?;
        worst = worst.max((sx.full_energy() / n as f64 - energy).abs() / energy);
        let xy = circular_convolve(&x, &y, 1)?;
        worst = worst.max(xy.max_abs_diff(&circular_convolve(&y, &x, 1)?)?);
    }
    Ok((worst <= 1e-10, format!("max deviation {worst:.2e}")))
}

pub fn check_operator_invariants(seed: u64) -> Outcome {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for layout in [TokenLayout::Sequence(10), TokenLayout::Grid(3, 4)] {
        let mut s = random_instance(layout, 3, 2, &mut rng);
        let y = lisa_forward(&s.qb, &s.kb, &s.v, &s.emb, &s.cfg)?;
        for i in 0..layout.tokens() {
            let kq = extract_query_kernel(&s.qb, &s.kb, &s.emb, &s.cfg, i)?;
            let row = kq.reconstruct(&s.v)?;
            for k in 0..3 {
                worst = worst.max((row.data()[k] - y.data()[i * 3 + k]).abs());
            }
        }
        s.emb.bb = Tensor::zeros(s.emb.bb.shape());
        let v2 = normal_tensor(s.v.shape(), 1.0, &mut rng);
        let f = |v: &Tensor| lisa_forward(&s.qb, &s.kb, v, &s.emb, &s.cfg);
        let sup = f(&s.v.add(&v2)?)?;
        worst = worst.max(sup.max_abs_diff(&f(&s.v)?.add(&f(&v2)?)?)?);
    }
    // Reversing head order with matching projection permutations.
    let cfg = LiSAConfig::new(TokenLayout::Sequence(8), 4, 2, 2)?.with_sharing(EmbeddingSharing::PerHead);
    let head = LiSAConfig::single_head(cfg.layout, 2, 2)?;
    let p = LiSAAttentionParams {
        qkv_w: normal_tensor(&[4, 12], 0.5, &mut rng),
        qkv_b: normal_tensor(&[12], 0.1, &mut rng),
        out_w: normal_tensor(&[4, 4], 0.5, &mut rng),
        out_b: normal_tensor(&[4], 0.1, &mut rng),
        emb: (0..2).map(|_| CircularEmbeddings::random_full(&head, 0.5, &mut rng)).collect(),
    };
    let swap = |col: usize| (col + 2) % 4;
    let mut q = p.clone();
    for blk in 0..3 {
        for col in 0..4 {
            for row in 0..4 {
                q.qkv_w.set(&[row, blk * 4 + col], p.qkv_w.at(&[row, blk * 4 + swap(col)]));
            }
            q.qkv_b.data_mut()[blk * 4 + col] = p.qkv_b.data()[blk * 4 + swap(col)];
        }
    }
    for row in 0..4 {
        for k in 0..4 {
            q.out_w.set(&[row, k], p.out_w.at(&[swap(row), k]));
        }
    }
    q.emb.reverse();
    let x = normal_tensor(&[8, 4], 1.0, &mut rng);
    worst = worst.max(lisa_multihead(&x, &p, &cfg)?.max_abs_diff(&lisa_multihead(&x, &q, &cfg)?)?);
    Ok((worst <= 1e-10, format!("max deviation {worst:.2e}")))
}

pub fn check_resize(seed: u64) -> Outcome {
    let mut rng = rng_from_seed(seed);
    let cfg = LiSAConfig::single_head(TokenLayout::Grid(14, 14), 4, 3)?;
    let emb = CircularEmbeddings::random_full(&cfg, 1.0, &mut rng);
    let same = resize_embeddings(&emb, &TokenLayout::Grid(14, 14))?;
    let id = same.wa.max_abs_diff(&emb.wa)?.max(same.wb.max_abs_diff(&emb.wb)?);
    let mut flat = CircularEmbeddings::zeros(&cfg);
    flat.wb = Tensor::full(flat.wb.shape(), 0.25);
    let up = resize_embeddings(&flat, &TokenLayout::Grid(24, 24))?;
    let dc = up.wb.data().iter().map(|v| (v - 0.25).abs()).fold(0.0, f64::max);
    Ok((
        id <= 1e-12 && dc <= 1e-10,
        format!("identity err {id:.2e}, constant err {dc:.2e}"),
    ))
}

pub fn check_accounting() -> Outcome {
    let base = ModelConfig::isotropic_tiny();
    let mut lines = Vec::new();
    let mut ok = true;
    for (d, want) in [(1, 5.76e6), (4, 5.88e6), (8, 6.04e6), (16, 6.36e6)] {
        let got = count_parameters(&base.clone().with_latent(d))?.total() as f64;
        ok &= ((got - want) / want).abs() <= 0.01;
        lines.push(format!("D={d}: {:.3}M", got / 1e6));
    }
    let sa = estimate_flops(&base, OperatorKind::SelfAttention, FftCostMode::Exact)?.total() as f64;
    ok &= ((sa - 1.25e9) / 1.25e9).abs() <= 0.02;
    let a = CostModel::new(OperatorKind::SelfAttention, 512, 96, 16, 3);
    ok &= CostModel { tokens: 1024, ..a }.attention_macs() == 4 * a.attention_macs();
    lines.push(format!("self-attention {:.4}G", sa / 1e9));
    Ok((ok, lines.join(", ")))
}

pub fn check_container(seed: u64) -> Outcome {
    let t = normal_tensor(&[3, 4, 5], 1.0, &mut rng_from_seed(seed));
    let back = decode_tensor(&encode_tensor(&t))?;
    let bits = t.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    let scalar = decode_tensor(&encode_tensor(&Tensor::scalar(-2.5)))?;
    let bytes = encode_tensor(&t);
    let truncated = decode_tensor(&bytes[..bytes.len() - 1]).is_err();
    let ok = bits && back.shape() == t.shape() && scalar.data() == [-2.5] && truncated;
    Ok((ok, "roundtrip, scalar and truncation".into()))
}

/// `(name, check)` pairs in report order.
pub fn suite(seed: u64) -> Vec<(&'static str, Box<dyn Fn() -> Outcome>)> {
    vec![
        ("oracle equivalence", Box::new(move || check_oracle_equivalence(100, seed))),
        ("bias decomposition", Box::new(move || check_decomposition(100, seed + 1))),
        ("gradients vs finite differences", Box::new(move || check_gradients(20, seed + 2))),
        ("fft roundtrip", Box::new(move || check_fft_roundtrip(512, seed + 3))),
        ("circular convolution", Box::new(move || check_convolution(100, seed + 4))),
        ("tensor invariants", Box::new(move || check_tensor_invariants(seed + 5))),
        ("fourier invariants", Box::new(move || check_fourier_invariants(seed + 6))),
        ("operator invariants", Box::new(move || check_operator_invariants(seed + 7))),
        ("embedding resize", Box::new(move || check_resize(seed + 8))),
        ("parameter and cost accounting", Box::new(check_accounting)),
        ("tensor container", Box::new(move || check_container(seed + 9))),
    ]
}

pub fn run_suite(seed: u64) -> Vec<Check> {
    suite(seed)
        .into_iter()
        .map(|(name, f)| {
            let t = Instant::now();
            let (passed, detail) = match f() {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            Check {
                name,
                passed,
                detail,
                seconds: t.elapsed().as_secs_f64(),
            }
        })
        .collect()
}
