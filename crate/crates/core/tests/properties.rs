use lisa_core::attention_ref::circulant_conv_direct;
use lisa_core::fourier::{circular_convolve, irfft, rfft};
use lisa_core::lisa::{lisa_forward, TokenLayout};
use lisa_core::ndtensor::{contract, l2_normalize, softmax, Contraction};
use lisa_core::random::rng_from_seed;
use lisa_core::verify::{circulant_reference, random_instance};
use lisa_core::Tensor;
use proptest::prelude::*;

fn vec_tensor(max_len: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-10.0f64..10.0, 1..=max_len).prop_map(|v| Tensor::from_vec(&[v.len()], v).unwrap())
}

fn pair(max_len: usize) -> impl Strategy<Value = (Tensor, Tensor)> {
    (1..=max_len).prop_flat_map(|n| {
        let side = || prop::collection::vec(-3.0f64..3.0, n).prop_map(move |v| Tensor::from_vec(&[n], v).unwrap());
        (side(), side())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_ignores_shifts(x in vec_tensor(16), shift in -100.0f64..100.0) {
        let a = softmax(&x, 0).unwrap();
        let b = softmax(&x.map(|v| v + shift), 0).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        prop_assert!((a.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_is_idempotent(x in vec_tensor(16)) {
        let once = l2_normalize(&x, 0).unwrap();
        let twice = l2_normalize(&once, 0).unwrap();
        prop_assert!(once.max_abs_diff(&twice).unwrap() < 1e-12);
    }

    #[test]
    fn contraction_matches_naive(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let a = lisa_core::random::normal_tensor(&[m, k], 1.0, &mut rng);
        let b = lisa_core::random::normal_tensor(&[n, k], 1.0, &mut rng);
        let fast = contract(&a, &b, Contraction::MatMulBt).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a.at(&[i, p]) * b.at(&[j, p])).sum();
                prop_assert!((fast.at(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rfft_roundtrip(x in vec_tensor(300)) {
        let back = irfft(&rfft(&x, 1).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&x).unwrap() < 1e-11);
    }

    #[test]
    fn rfft_is_linear((x, y) in pair(64), a in -2.0f64..2.0) {
        let lhs = rfft(&x.scale(a).add(&y).unwrap(), 1).unwrap();
        let (sx, sy) = (rfft(&x, 1).unwrap(), rfft(&y, 1).unwrap());
        for ((l, u), v) in lhs.values().iter().zip(sx.values()).zip(sy.values()) {
            prop_assert!((l - (u * a + v)).norm() < 1e-10);
        }
    }

    #[test]
    fn parseval((x, _y) in pair(128)) {
        let n = x.len() as f64;
        let e = x.dot(&x).unwrap();
        let s = rfft(&x, 1).unwrap();
        prop_assert!((s.full_energy() / n - e).abs() <= 1e-10 * e.max(1.0));
    }

    #[test]
    fn convolution_commutes_and_matches_direct((x, w) in pair(48)) {
        let n = x.len();
        let xw = circular_convolve(&x, &w, 1).unwrap();
        let wx = circular_convolve(&w, &x, 1).unwrap();
        prop_assert!(xw.max_abs_diff(&wx).unwrap() < 1e-10);
        let direct = circulant_conv_direct(&x.clone().reshape(&[n, 1]).unwrap(), &w).unwrap();
        prop_assert!(xw.max_abs_diff(&direct.reshape(&[n]).unwrap()).unwrap() < 1e-10);
    }

    #[test]
    fn operator_matches_oracle(n in 1usize..=20, ch in 1usize..=4, d in 1usize..=3, seed in any::<u64>()) {
        let s = random_instance(TokenLayout::Sequence(n), ch, d, &mut rng_from_seed(seed));
        let y = lisa_forward(&s.qb, &s.kb, &s.v, &s.emb, &s.cfg).unwrap();
        prop_assert!(y.rel_err(&circulant_reference(&s).unwrap()).unwrap() <= 1e-10);
    }

    #[test]
    fn grid_operator_matches_oracle(h in 1usize..=5, w in 1usize..=5, seed in any::<u64>()) {
        let s = random_instance(TokenLayout::Grid(h, w), 2, 2, &mut rng_from_seed(seed));
        let y = lisa_forward(&s.qb, &s.kb, &s.v, &s.emb, &s.cfg).unwrap();
        prop_assert!(y.rel_err(&circulant_reference(&s).unwrap()).unwrap() <= 1e-10);
    }
}
