mod common;

use common::*;
use medtex::losses::*;
use medtex::tensor::{Shape, Tensor};
use proptest::prelude::*;

fn distribution(raw: &[f64], classes: usize) -> Vec<f64> {
    softmax_rows(raw, classes)
}

#[test]
fn uniform_cross_entropy_is_ln2() {
    let u = Tensor::full(Shape::new(3, 2, 1, 1), 0.5f64);
    assert!((output_distill_loss(&u, &u).unwrap() - 2f64.ln()).abs() < 1e-9);
}

#[test]
fn perfect_mean_with_unit_variance_gives_zero() {
    let mut r = rng(4);
    let t = random_tensor(&mut r, Shape::new(2, 3, 4, 4), -1.0, 1.0);
    let alpha = vec![alpha_for_variance(1.0, DEFAULT_EPSILON); 3];
    let nll = gaussian_nll(&t, &t, &alpha, DEFAULT_EPSILON).unwrap();
    assert!(nll.value.abs() < 1e-9, "{}", nll.value);
    assert!(nll.grad_mean.data().iter().all(|&g| g == 0.0));
}

#[test]
fn clamp_keeps_loss_finite_for_zero_student_mass() {
    let p = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0f64, 0.0]).unwrap();
    let q = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.0f64, 1.0]).unwrap();
    let l = output_distill_loss(&p, &q).unwrap();
    assert!((l - (-PROB_FLOOR.ln())).abs() < 1e-9);
}

#[test]
fn intermediate_gradients_match_finite_differences() {
    for index in 1..=4 {
        let err = check_intermediate_gradient(11, index);
        assert!(err <= FD_REL_TOL, "layer {index}: {err}");
    }
}

#[test]
fn total_gradient_matches_finite_differences() {
    let err = check_total_gradient(5, DEFAULT_LAMBDA);
    assert!(err <= FD_REL_TOL, "{err}");
    let err = check_total_gradient(6, 0.5);
    assert!(err <= FD_REL_TOL, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn output_gradient_matches_finite_differences(seed in 0u64..10_000, batch in 1usize..5) {
        let err = check_output_loss_gradient(seed, batch);
        prop_assert!(err <= FD_REL_TOL, "{}", err);
    }

    #[test]
    fn cross_entropy_bounded_below_by_entropy(
        a in prop::collection::vec(-4.0f64..4.0, 8),
        b in prop::collection::vec(-4.0f64..4.0, 8),
    ) {
        let shape = Shape::new(4, 2, 1, 1);
        let p = Tensor::from_vec(shape, distribution(&a, 2)).unwrap();
        let q = Tensor::from_vec(shape, distribution(&b, 2)).unwrap();
        let ce = output_distill_loss(&p, &q).unwrap();
        prop_assert!(ce >= entropy(&p) - 1e-12);
        prop_assert!((output_distill_loss(&p, &p).unwrap() - entropy(&p)).abs() < 1e-12);
        let oracle = cross_entropy_oracle(p.data(), q.data(), 4);
        prop_assert!((ce - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
    }

    #[test]
    fn gaussian_value_matches_density_oracle(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let shape = Shape::new(2, 3, 2, 3);
        let t = random_tensor(&mut r, shape, -2.0, 2.0);
        let m = random_tensor(&mut r, shape, -2.0, 2.0);
        let alpha: Vec<f64> = random_tensor(&mut r, Shape::new(1, 3, 1, 1), -3.0, 3.0).into_vec();
        let var = softplus_variance(&alpha, DEFAULT_EPSILON);
        let got = gaussian_nll(&t, &m, &alpha, DEFAULT_EPSILON).unwrap().value;
        let want = gaussian_oracle(t.data(), m.data(), &var, 2, 6);
        prop_assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0));
    }

    #[test]
    fn optimal_variance_matches_grid_search(seed in 0u64..10_000, scale in 0.05f64..2.0) {
        let mut r = rng(seed);
        let shape = Shape::new(2, 2, 4, 4);
        let t = random_tensor(&mut r, shape, -scale, scale);
        let m = random_tensor(&mut r, shape, -scale, scale);
        let closed = optimal_variance(&t, &m, DEFAULT_EPSILON).unwrap();
        for c in 0..2 {
            let objective = |v: f64| {
                let mut var = closed.clone();
                var[c] = v;
                gaussian_oracle(t.data(), m.data(), &var, 2, 16)
            };
            let searched = grid_search_min(objective, DEFAULT_EPSILON, 10.0);
            prop_assert!((searched - closed[c]).abs() <= 1e-6, "channel {}: {} vs {}", c, searched, closed[c]);
        }
        // The analytic alpha gradient vanishes there too.
        let alpha: Vec<f64> = closed.iter().map(|&v| alpha_for_variance(v, DEFAULT_EPSILON)).collect();
        let g = gaussian_nll(&t, &m, &alpha, DEFAULT_EPSILON).unwrap().grad_alpha;
        prop_assert!(g.iter().all(|v| v.abs() < 1e-8), "{:?}", g);
    }

    #[test]
    fn total_is_output_plus_scaled_sum(lm in 0.0f64..5.0, li in prop::array::uniform4(-100.0f64..100.0), lambda in 0.0f64..1.0) {
        let t = DistillLossTerms::new(lm, Some(li), lambda);
        prop_assert!((t.total - (lm + lambda * li.iter().sum::<f64>())).abs() < 1e-9);
        prop_assert_eq!(DistillLossTerms::new(lm, None, lambda).total, lm);
    }
}
