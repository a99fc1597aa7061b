mod common;

use common::{max_abs_diff, oracle_ridge, rng, uniform};
use gop_core::ridge::{
    evaluate_candidate, mse, solve_augmented, solve_ridge, solve_ridge_branch, Branch, EvalSplit, RidgeProblem,
    ScoreMetric,
};
use ndarray::{concatenate, s, Array2, Axis};
use proptest::prelude::*;

#[test]
fn matches_oracle_on_tall_problem() {
    let mut r = rng(1);
    let h = uniform(&mut r, 30, 7, -1.0, 1.0);
    let y = uniform(&mut r, 30, 3, -1.0, 1.0);
    let b = solve_ridge(RidgeProblem::new(h.view(), y.view(), 0.1)).unwrap();
    assert!(max_abs_diff(&b, &oracle_ridge(&h, &y, 0.1)) < 1e-8);
}

#[test]
fn branches_agree_on_square_problem() {
    let mut r = rng(2);
    let h = uniform(&mut r, 20, 20, -1.0, 1.0);
    let y = uniform(&mut r, 20, 2, -1.0, 1.0);
    let p = RidgeProblem::new(h.view(), y.view(), 1e-3);
    let primal = solve_ridge_branch(p, Branch::Primal).unwrap();
    let dual = solve_ridge_branch(p, Branch::Dual).unwrap();
    assert!(max_abs_diff(&primal, &dual) < 1e-8);
}

#[test]
fn split_columns_equal_unsplit_solve() {
    let mut r = rng(3);
    let h = uniform(&mut r, 40, 10, -1.0, 1.0);
    let y = uniform(&mut r, 40, 3, -1.0, 1.0);
    let whole = solve_ridge(RidgeProblem::new(h.view(), y.view(), 0.5)).unwrap();
    let parts = solve_augmented(h.slice(s![.., ..6]), h.slice(s![.., 6..]), y.view(), 0.5).unwrap();
    assert!(max_abs_diff(&whole, &parts) < 1e-10);
}

#[test]
fn least_squares_reproduces_planted_map() {
    let mut r = rng(4);
    let h = uniform(&mut r, 50, 5, -1.0, 1.0);
    let b = uniform(&mut r, 5, 2, -2.0, 2.0);
    let y = h.dot(&b);
    let got = solve_ridge(RidgeProblem::new(h.view(), y.view(), 0.0)).unwrap();
    assert!(max_abs_diff(&got, &b) < 1e-10);
}

#[test]
fn separable_blobs_score_full_accuracy() {
    let mut r = rng(5);
    let n = 40;
    let mut h = uniform(&mut r, n, 3, -0.3, 0.3);
    let mut y = Array2::zeros((n, 2));
    for i in 0..n {
        let c = i % 2;
        h[[i, 0]] += if c == 0 { -2.0 } else { 2.0 };
        y[[i, c]] = 1.0;
    }
    let fit = evaluate_candidate(h.view(), y.view(), None, &[0.1, 1.0, 10.0], ScoreMetric::Accuracy).unwrap();
    assert_eq!(fit.accuracy, 1.0);
    assert_eq!(fit.score, 1.0);
}

#[test]
fn scoring_uses_the_evaluation_split() {
    let mut r = rng(6);
    let h = uniform(&mut r, 30, 4, -1.0, 1.0);
    let y = uniform(&mut r, 30, 2, -1.0, 1.0);
    let hv = uniform(&mut r, 10, 4, -1.0, 1.0);
    let yv = uniform(&mut r, 10, 2, -1.0, 1.0);
    let eval = EvalSplit { h: hv.view(), y: yv.view() };
    let fit = evaluate_candidate(h.view(), y.view(), Some(eval), &[1.0], ScoreMetric::Mse).unwrap();
    let pred = hv.dot(&fit.weights) + &fit.bias;
    assert!((fit.loss - mse(pred.view(), yv.view())).abs() < 1e-12);
    assert!((fit.score + fit.loss).abs() < 1e-12);
}

fn instance() -> impl Strategy<Value = (u64, usize, usize, usize)> {
    (any::<u64>(), 2usize..40, 1usize..12, 1usize..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn training_error_grows_with_ridge((seed, n, d, c) in instance()) {
        let mut r = rng(seed);
        let h = uniform(&mut r, n, d, -1.0, 1.0);
        let y = uniform(&mut r, n, c, -1.0, 1.0);
        let mut last = -1.0;
        for cc in [0.01, 0.1, 1.0, 10.0, 100.0] {
            let b = solve_ridge(RidgeProblem::new(h.view(), y.view(), cc)).unwrap();
            let e = mse(h.dot(&b).view(), y.view());
            prop_assert!(e >= last - 1e-10);
            last = e;
        }
    }

    #[test]
    fn extra_columns_never_hurt_least_squares((seed, n, d, c) in instance()) {
        prop_assume!(d + 2 <= n);
        let mut r = rng(seed);
        let h = uniform(&mut r, n, d, -1.0, 1.0);
        let extra = uniform(&mut r, n, 2, -1.0, 1.0);
        let y = uniform(&mut r, n, c, -1.0, 1.0);
        let b1 = solve_ridge(RidgeProblem::new(h.view(), y.view(), 0.0)).unwrap();
        let e1 = mse(h.dot(&b1).view(), y.view());
        let wide = concatenate(Axis(1), &[h.view(), extra.view()]).unwrap();
        let b2 = solve_augmented(h.view(), extra.view(), y.view(), 0.0).unwrap();
        let e2 = mse(wide.dot(&b2).view(), y.view());
        prop_assert!(e2 <= e1 + 1e-10);
    }

    #[test]
    fn empty_existing_block_is_exact((seed, n, d, c) in instance()) {
        let mut r = rng(seed);
        let h = uniform(&mut r, n, d, -1.0, 1.0);
        let y = uniform(&mut r, n, c, -1.0, 1.0);
        let a = solve_ridge(RidgeProblem::new(h.view(), y.view(), 0.3)).unwrap();
        let b = solve_augmented(Array2::zeros((n, 0)).view(), h.view(), y.view(), 0.3).unwrap();
        prop_assert_eq!(a, b);
    }
}
