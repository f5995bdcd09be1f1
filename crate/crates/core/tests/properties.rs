use proptest::prelude::*;
use ulab::metrics::ngram_overlap;
use ulab::numerics::{matmul, softmax_row, svd, truncate, Matrix};
use ulab::objectives::{ga_logit_grad, ihl_logit_grad, ihl_token};

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, 2..60)
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(z in logits()) {
        let p = softmax_row(&z).unwrap();
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hinge_bounded_and_gradients_sum_to_zero(z in logits(), pick in 0usize..1000) {
        let p = softmax_row(&z).unwrap();
        let t = pick % p.len();
        let h = ihl_token(&p, t);
        prop_assert!((0.0..=2.0).contains(&h));
        for g in [ihl_logit_grad(&p, t).unwrap(), ga_logit_grad(&p, t).unwrap()] {
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-13);
        }
        // the hinge gradient pushes the true logit up and the runner-up down
        let g = ihl_logit_grad(&p, t).unwrap();
        prop_assert!(g[t] >= 0.0);
    }

    #[test]
    fn svd_reconstructs(rows in 1usize..7, cols in 1usize..7, seed in prop::collection::vec(-5.0f64..5.0, 36)) {
        let m = Matrix::from_fn(rows, cols, |i, j| seed[i * 6 + j]);
        let f = svd(&m).unwrap();
        let back = f.reconstruct();
        prop_assert!(back.sub(&m).unwrap().max_abs() <= 1e-10 * (1.0 + m.max_abs()));
        prop_assert!(f.s.windows(2).all(|w| w[0] >= w[1]));
        let r = f.rank().min(2);
        let t = truncate(&f, r).unwrap();
        let utu = matmul(&t.u.transpose(), &t.u).unwrap();
        prop_assert!(utu.sub(&Matrix::identity(r)).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn overlap_is_a_fraction(a in prop::collection::vec(0u32..4, 0..15), b in prop::collection::vec(0u32..4, 0..15), n in 1usize..4) {
        let o = ngram_overlap(&a, &b, n);
        prop_assert!((0.0..=1.0).contains(&o));
        if a.len() >= n {
            prop_assert_eq!(ngram_overlap(&a, &a, n), 1.0);
        }
    }
}
