use lisa_core::attention_ref::{circulant2d_from_kernel, circulant_from_kernel, sa_full_materialized, Materialized};
use lisa_core::lisa::{
    extract_query_kernel, lisa_backward, lisa_forward, lisa_forward_2d, lisa_forward_saved, lisa_multihead,
    CircularEmbeddings, EmbeddingSharing, LiSAAttentionParams, LiSAConfig, LiSALayer, TokenLayout,
};
use lisa_core::ndtensor::{l2_normalize, linear};
use lisa_core::random::{normal_tensor, rng_from_seed};
use lisa_core::{Error, Tensor};
use rand_chacha::ChaCha8Rng;

struct Case {
    cfg: LiSAConfig,
    qb: Tensor,
    kb: Tensor,
    v: Tensor,
    emb: CircularEmbeddings,
}

fn case(layout: TokenLayout, ch: usize, d: usize, seed: u64) -> Case {
    let mut rng: ChaCha8Rng = rng_from_seed(seed);
    let cfg = LiSAConfig::single_head(layout, ch, d).unwrap();
    let n = layout.tokens();
    let qb = l2_normalize(&normal_tensor(&[n, ch], 1.0, &mut rng), 1).unwrap();
    let kb = l2_normalize(&normal_tensor(&[n, ch], 1.0, &mut rng), 1).unwrap();
    let v = normal_tensor(&[n, ch], 1.0, &mut rng);
    let emb = CircularEmbeddings::random_full(&cfg, 0.5, &mut rng);
    Case { cfg, qb, kb, v, emb }
}

/// Brute-force evaluation with explicitly materialized circulant matrices.
fn circulant_oracle(c: &Case) -> Tensor {
    let (ra, rb) = match c.cfg.layout {
        TokenLayout::Sequence(_) => (
            circulant_from_kernel(&c.emb.wa).unwrap(),
            circulant_from_kernel(&c.emb.wb).unwrap(),
        ),
        TokenLayout::Grid(..) => (
            circulant2d_from_kernel(&c.emb.wa).unwrap(),
            circulant2d_from_kernel(&c.emb.wb).unwrap(),
        ),
    };
    let m = Materialized {
        ra,
        rb,
        ba: &c.emb.ba,
        bb: &c.emb.bb,
    };
    sa_full_materialized(&c.qb, &c.kb, &c.v, &m).unwrap()
}

#[test]
fn fft_path_matches_circulant_brute_force() {
    for (i, n) in [4, 7, 12, 16].into_iter().enumerate() {
        for seed in 0..3 {
            let c = case(TokenLayout::Sequence(n), 4, 3, 100 * i as u64 + seed);
            let y = lisa_forward(&c.qb, &c.kb, &c.v, &c.emb, &c.cfg).unwrap();
            let err = y.max_abs_diff(&circulant_oracle(&c)).unwrap();
            assert!(err <= 1e-10, "N={n} seed={seed}: {err:e}");
        }
    }
}

#[test]
fn grid_forward_matches_doubly_circulant_oracle() {
    let c = case(TokenLayout::Grid(4, 5), 3, 2, 9);
    let y = lisa_forward_2d(&c.qb, &c.kb, &c.v, &c.emb, &c.cfg).unwrap();
    assert!(y.max_abs_diff(&circulant_oracle(&c)).unwrap() <= 1e-10);
}

#[test]
fn degenerate_grid_equals_sequence() {
    let c = case(TokenLayout::Grid(1, 9), 3, 2, 10);
    let y2 = lisa_forward_2d(&c.qb, &c.kb, &c.v, &c.emb, &c.cfg).unwrap();
    let cfg1 = LiSAConfig::single_head(TokenLayout::Sequence(9), 3, 2).unwrap();
    let emb1 = CircularEmbeddings {
        wa: c.emb.wa.clone().reshape(&[9, 3, 2]).unwrap(),
        wb: c.emb.wb.clone().reshape(&[9, 2]).unwrap(),
        ba: c.emb.ba.clone(),
        bb: c.emb.bb.clone(),
    };
    let y1 = lisa_forward(&c.qb, &c.kb, &c.v, &emb1, &cfg1).unwrap();
    assert!(y1.max_abs_diff(&y2).unwrap() <= 1e-12);
}

#[test]
fn grid_forward_rejects_bad_layouts() {
    let c = case(TokenLayout::Sequence(6), 2, 1, 11);
    assert!(matches!(
        lisa_forward_2d(&c.qb, &c.kb, &c.v, &c.emb, &c.cfg),
        Err(Error::Config(_))
    ));
    let g = case(TokenLayout::Grid(2, 3), 2, 1, 12);
    let short = Tensor::zeros(&[5, 2]);
    assert!(matches!(
        lisa_forward_2d(&short, &short, &short, &g.emb, &g.cfg),
        Err(Error::Shape(_))
    ));
}

/// `Wa = 0, Ba = 1, Wb = delta, Bb = 0` gives `Y[i,k] = D (sum_c Qb[i,c]) V[i,k]`.
fn collapse_case(layout: TokenLayout, ch: usize, d: usize, seed: u64) -> Case {
    let mut c = case(layout, ch, d, seed);
    c.emb.wa = Tensor::zeros(c.emb.wa.shape());
    c.emb.ba = Tensor::ones(c.emb.ba.shape());
    c.emb.bb = Tensor::zeros(c.emb.bb.shape());
    let mut wb = Tensor::zeros(c.emb.wb.shape());
    for dd in 0..d {
        wb.data_mut()[dd] = 1.0;
    }
    c.emb.wb = wb;
    c
}

fn collapse_expected(c: &Case) -> Tensor {
    let (n, ch, d) = (c.cfg.tokens(), c.cfg.head_channels(), c.cfg.latent as f64);
    Tensor::from_fn(&[n, ch], |f| {
        let i = f / ch;
        let qs: f64 = c.qb.data()[i * ch..(i + 1) * ch].iter().sum();
        d * qs * c.v.data()[f]
    })
}

#[test]
fn analytic_collapses() {
    for layout in [TokenLayout::Sequence(6), TokenLayout::Grid(3, 4)] {
        let c = collapse_case(layout, 3, 4, 13);
        let y = lisa_forward(&c.qb, &c.kb, &c.v, &c.emb, &c.cfg).unwrap();
        assert!(y.max_abs_diff(&collapse_expected(&c)).unwrap() <= 1e-12);
    }
    let mut c = case(TokenLayout::Sequence(5), 3, 2, 14);
    c.emb.wa = Tensor::zeros(c.emb.wa.shape());
    c.emb.ba = Tensor::zeros(c.emb.ba.shape());
    let y = lisa_forward(&c.qb, &c.kb, &c.v, &c.emb, &c.cfg).unwrap();
    assert_eq!(y.max_abs(), 0.0);
}

#[test]
fn linear_in_values_without_value_bias() {
    let mut c = case(TokenLayout::Sequence(10), 3, 2, 15);
    c.emb.bb = Tensor::zeros(c.emb.bb.shape());
    let v2 = normal_tensor(&[10, 3], 1.0, &mut rng_from_seed(16));
    let (a, b) = (1.7, -0.4);
    let mix = c.v.scale(a).add(&v2.scale(b)).unwrap();
    let f = |v: &Tensor| lisa_forward(&c.qb, &c.kb, v, &c.emb, &c.cfg).unwrap();
    let lhs = f(&mix);
    let rhs = f(&c.v).scale(a).add(&f(&v2).scale(b)).unwrap();
    assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10);
}

#[test]
fn shape_errors() {
    let c = case(TokenLayout::Sequence(6), 2, 2, 17);
    let bad = Tensor::zeros(&[5, 2]);
    assert!(matches!(
        lisa_forward(&bad, &c.kb, &c.v, &c.emb, &c.cfg),
        Err(Error::Shape(_))
    ));
    let mut emb = c.emb.clone();
    emb.wb = Tensor::zeros(&[6, 3]);
    assert!(matches!(lisa_forward(&c.qb, &c.kb, &c.v, &emb, &c.cfg), Err(Error::Shape(_))));
}

// Kernel extraction

#[test]
fn query_kernel_reconstructs_output_rows() {
    for layout in [TokenLayout::Sequence(9), TokenLayout::Grid(3, 5)] {
        let c = case(layout, 3, 2, 18);
        let y = lisa_forward(&c.qb, &c.kb, &c.v, &c.emb, &c.cfg).unwrap();
        let mut saw_negative = false;
        for i in 0..layout.tokens() {
            let kq = extract_query_kernel(&c.qb, &c.kb, &c.emb, &c.cfg, i).unwrap();
            assert_eq!(kq.weights.shape(), layout.dims().as_slice());
            saw_negative |= kq.weights.data().iter().any(|&x| x < 0.0);
            let row = kq.reconstruct(&c.v).unwrap();
            for k in 0..3 {
                assert!((row.data()[k] - y.data()[i * 3 + k]).abs() <= 1e-10);
            }
        }
        assert!(saw_negative);
    }
}

#[test]
fn identity_kernel_in_collapse_case() {
    let c = collapse_case(TokenLayout::Sequence(6), 3, 4, 19);
    for i in 0..6 {
        let kq = extract_query_kernel(&c.qb, &c.kb, &c.emb, &c.cfg, i).unwrap();
        let qs: f64 = c.qb.data()[i * 3..(i + 1) * 3].iter().sum();
        for j in 0..6 {
            let want = if i == j { 4.0 * qs } else { 0.0 };
            assert!((kq.weights.data()[j] - want).abs() <= 1e-12);
        }
    }
}

// Gradients

type Fd = Box<dyn Fn(&mut Case) -> &mut Tensor>;

fn loss(c: &Case, u: &Tensor) -> f64 {
    lisa_forward(&c.qb, &c.kb, &c.v, &c.emb, &c.cfg).unwrap().dot(u).unwrap()
}

fn rel(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-8 {
        (a - n).abs()
    } else {
        (a - n).abs() / scale
    }
}

fn check_gradients(layout: TokenLayout, ch: usize, d: usize, seed: u64) {
    let c0 = case(layout, ch, d, seed);
    let n = layout.tokens();
    let u = normal_tensor(&[n, ch], 1.0, &mut rng_from_seed(seed + 1000));
    let (_, cache) = lisa_forward_saved(&c0.qb, &c0.kb, &c0.v, &c0.emb, &c0.cfg).unwrap();
    let g = lisa_backward(&u, &cache).unwrap();
    let params: Vec<(&str, Fd, &Tensor)> = vec![
        ("Q", Box::new(|c: &mut Case| &mut c.qb), &g.d_q),
        ("K", Box::new(|c: &mut Case| &mut c.kb), &g.d_k),
        ("V", Box::new(|c: &mut Case| &mut c.v), &g.d_v),
        ("Wa", Box::new(|c: &mut Case| &mut c.emb.wa), &g.d_wa),
        ("Wb", Box::new(|c: &mut Case| &mut c.emb.wb), &g.d_wb),
        ("Ba", Box::new(|c: &mut Case| &mut c.emb.ba), &g.d_ba),
        ("Bb", Box::new(|c: &mut Case| &mut c.emb.bb), &g.d_bb),
    ];
    let h = 1e-5;
    let mut c = case(layout, ch, d, seed);
    for (name, get, grad) in params {
        assert_eq!(grad.shape(), get(&mut c).shape(), "{name} gradient shape");
        for idx in 0..grad.len() {
            let orig = get(&mut c).data()[idx];
            get(&mut c).data_mut()[idx] = orig + h;
            let lp = loss(&c, &u);
            get(&mut c).data_mut()[idx] = orig - h;
            let lm = loss(&c, &u);
            get(&mut c).data_mut()[idx] = orig;
            let num = (lp - lm) / (2.0 * h);
            let e = rel(grad.data()[idx], num);
            assert!(e < 1e-5, "{name}[{idx}]: analytic {} vs numeric {num} ({e:e})", grad.data()[idx]);
        }
    }
}

#[test]
fn gradients_match_central_differences() {
    check_gradients(TokenLayout::Sequence(8), 3, 2, 20);
    check_gradients(TokenLayout::Sequence(7), 2, 3, 21);
    check_gradients(TokenLayout::Sequence(12), 2, 1, 22);
    check_gradients(TokenLayout::Grid(3, 4), 2, 2, 23);
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let c = case(TokenLayout::Sequence(6), 3, 2, 24);
    let (_, cache) = lisa_forward_saved(&c.qb, &c.kb, &c.v, &c.emb, &c.cfg).unwrap();
    let g = lisa_backward(&Tensor::zeros(&[6, 3]), &cache).unwrap();
    for t in [&g.d_q, &g.d_k, &g.d_v, &g.d_wa, &g.d_wb, &g.d_ba, &g.d_bb] {
        assert_eq!(t.max_abs(), 0.0);
    }
}

#[test]
fn key_bias_gradient_in_collapse_case() {
    let c = collapse_case(TokenLayout::Sequence(7), 3, 2, 25);
    let u = normal_tensor(&[7, 3], 1.0, &mut rng_from_seed(26));
    let (_, cache) = lisa_forward_saved(&c.qb, &c.kb, &c.v, &c.emb, &c.cfg).unwrap();
    let g = lisa_backward(&u, &cache).unwrap();
    for cc in 0..3 {
        let want: f64 = (0..7)
            .map(|i| {
                let uv: f64 = (0..3).map(|k| u.data()[i * 3 + k] * c.v.data()[i * 3 + k]).sum();
                c.qb.data()[i * 3 + cc] * uv
            })
            .sum();
        for dd in 0..2 {
            assert!((g.d_ba.data()[cc * 2 + dd] - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn layer_requires_retained_forward() {
    let c = case(TokenLayout::Sequence(5), 2, 2, 27);
    let mut layer = LiSALayer::new(c.cfg, c.emb.clone()).unwrap();
    assert!(matches!(layer.backward(&Tensor::zeros(&[5, 2])), Err(Error::State(_))));
    let y = layer.forward_train(&c.qb, &c.kb, &c.v).unwrap();
    assert_eq!(y, layer.forward(&c.qb, &c.kb, &c.v).unwrap());
    assert!(layer.backward(&Tensor::ones(&[5, 2])).is_ok());
    assert!(matches!(layer.backward(&Tensor::ones(&[5, 2])), Err(Error::State(_))));
}

// Multi-head

fn random_params(cfg: &LiSAConfig, seed: u64) -> LiSAAttentionParams {
    let mut rng = rng_from_seed(seed);
    let c = cfg.channels;
    let head = LiSAConfig::single_head(cfg.layout, cfg.head_channels(), cfg.latent).unwrap();
    LiSAAttentionParams {
        qkv_w: normal_tensor(&[c, 3 * c], 0.5, &mut rng),
        qkv_b: normal_tensor(&[3 * c], 0.1, &mut rng),
        out_w: normal_tensor(&[c, c], 0.5, &mut rng),
        out_b: normal_tensor(&[c], 0.1, &mut rng),
        emb: (0..cfg.embedding_sets())
            .map(|_| CircularEmbeddings::random_full(&head, 0.5, &mut rng))
            .collect(),
    }
}

/// Independent per-head evaluation on explicit column slices.
fn multihead_oracle(x: &Tensor, p: &LiSAAttentionParams, cfg: &LiSAConfig) -> Tensor {
    let (c, ch) = (cfg.channels, cfg.head_channels());
    let qkv = linear(x, &p.qkv_w, &p.qkv_b).unwrap();
    let n = cfg.tokens();
    let col = |start: usize| Tensor::from_fn(&[n, ch], |f| qkv.data()[(f / ch) * 3 * c + start + f % ch]);
    let mut cat = Tensor::zeros(&[n, c]);
    for h in 0..cfg.heads {
        let qb = l2_normalize(&col(h * ch), 1).unwrap();
        let kb = l2_normalize(&col(c + h * ch), 1).unwrap();
        let v = col(2 * c + h * ch);
        let emb = &p.emb[if p.emb.len() == 1 { 0 } else { h }];
        let y = sa_full_materialized(
            &qb,
            &kb,
            &v,
            &Materialized {
                ra: circulant_from_kernel(&emb.wa).unwrap(),
                rb: circulant_from_kernel(&emb.wb).unwrap(),
                ba: &emb.ba,
                bb: &emb.bb,
            },
        )
        .unwrap();
        for i in 0..n {
            for k in 0..ch {
                cat.set(&[i, h * ch + k], y.at(&[i, k]));
            }
        }
    }
    linear(&cat, &p.out_w, &p.out_b).unwrap()
}

#[test]
fn multihead_matches_per_head_oracle() {
    for sharing in [EmbeddingSharing::Shared, EmbeddingSharing::PerHead] {
        let cfg = LiSAConfig::new(TokenLayout::Sequence(16), 8, 2, 2)
            .unwrap()
            .with_sharing(sharing);
        let p = random_params(&cfg, 30);
        let x = normal_tensor(&[16, 8], 1.0, &mut rng_from_seed(31));
        let y = lisa_multihead(&x, &p, &cfg).unwrap();
        assert!(y.max_abs_diff(&multihead_oracle(&x, &p, &cfg)).unwrap() <= 1e-10);
    }
}

#[test]
fn single_head_is_projection_composition() {
    let cfg = LiSAConfig::new(TokenLayout::Sequence(6), 4, 1, 2).unwrap();
    let p = random_params(&cfg, 32);
    let x = normal_tensor(&[6, 4], 1.0, &mut rng_from_seed(33));
    let qkv = linear(&x, &p.qkv_w, &p.qkv_b).unwrap();
    let qb = l2_normalize(&qkv.narrow_last(0, 4).unwrap(), 1).unwrap();
    let kb = l2_normalize(&qkv.narrow_last(4, 4).unwrap(), 1).unwrap();
    let v = qkv.narrow_last(8, 4).unwrap();
    let y = lisa_forward(&qb, &kb, &v, &p.emb[0], &cfg).unwrap();
    let want = linear(&y, &p.out_w, &p.out_b).unwrap();
    assert!(lisa_multihead(&x, &p, &cfg).unwrap().max_abs_diff(&want).unwrap() <= 1e-12);
}

#[test]
fn zero_projections_leave_output_bias() {
    let cfg = LiSAConfig::new(TokenLayout::Sequence(5), 6, 3, 2).unwrap();
    let mut p = random_params(&cfg, 34);
    p.qkv_w = Tensor::zeros(p.qkv_w.shape());
    p.qkv_b = Tensor::zeros(p.qkv_b.shape());
    let x = normal_tensor(&[5, 6], 1.0, &mut rng_from_seed(35));
    let y = lisa_multihead(&x, &p, &cfg).unwrap();
    for i in 0..5 {
        for k in 0..6 {
            assert_eq!(y.at(&[i, k]), p.out_b.data()[k]);
        }
    }
}

#[test]
fn head_permutation_equivariance() {
    let cfg = LiSAConfig::new(TokenLayout::Sequence(8), 6, 3, 2)
        .unwrap()
        .with_sharing(EmbeddingSharing::PerHead);
    let p = random_params(&cfg, 36);
    let x = normal_tensor(&[8, 6], 1.0, &mut rng_from_seed(37));
    let perm = [2usize, 0, 1];
    let ch = 2;
    let c = 6;
    // new head h takes old head perm[h]
    let col_map = |new_col: usize| -> usize {
        let (h, r) = (new_col / ch, new_col % ch);
        perm[h] * ch + r
    };
    let mut q = p.clone();
    for block in 0..3 {
        for new_col in 0..c {
            let old = block * c + col_map(new_col);
            for row in 0..c {
                q.qkv_w.set(&[row, block * c + new_col], p.qkv_w.at(&[row, old]));
            }
            q.qkv_b.data_mut()[block * c + new_col] = p.qkv_b.data()[old];
        }
    }
    for new_row in 0..c {
        for k in 0..c {
            q.out_w.set(&[new_row, k], p.out_w.at(&[col_map(new_row), k]));
        }
    }
    q.emb = perm.iter().map(|&h| p.emb[h].clone()).collect();
    let a = lisa_multihead(&x, &p, &cfg).unwrap();
    let b = lisa_multihead(&x, &q, &cfg).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
}

#[test]
fn heads_must_divide_channels() {
    assert!(matches!(
        LiSAConfig::new(TokenLayout::Sequence(4), 10, 3, 2),
        Err(Error::Config(_))
    ));
}
