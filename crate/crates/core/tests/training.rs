mod common;

use common::{numeric_grad, one_layer_net, oracle_ridge, rel_err, rng, uniform};
use gop_core::train::{
    backward, evaluate, finetune, init_batchnorm_from_standardization, DataRef, LossKind, LrStage, PassMode,
    TrainSpec, TrainableSelection, WeightReg,
};
use gop_core::operators::enumerate_operator_sets;
use gop_core::{GopError, GopNetwork, NormMode, OperatorSet};
use ndarray::{concatenate, Array2, Axis};

/// Checks every selected coordinate; a coordinate whose two difference
/// quotients disagree sits on a kink and is skipped. Returns
/// `(checked, worst relative error)`.
fn check_all(net: &GopNetwork<f64>, x: &Array2<f64>, y: &Array2<f64>, sel: &TrainableSelection, mode: PassMode) -> (usize, f64) {
    let g = backward(net, x.view(), y.view(), sel, LossKind::Mse, mode).unwrap();
    let mut checked = 0;
    let mut worst = 0.0f64;
    for id in sel.parameters(net) {
        let n1 = numeric_grad(net, x, y, sel, mode, id, 1e-5);
        let n2 = numeric_grad(net, x, y, sel, mode, id, 1e-6);
        if rel_err(n1, n2) > 1e-4 {
            continue;
        }
        let a = g.get(net, id).unwrap_or(0.0);
        worst = worst.max(rel_err(a, n1));
        checked += 1;
    }
    (checked, worst)
}

fn toy_data(seed: u64, n: usize, d: usize, c: usize) -> (Array2<f64>, Array2<f64>) {
    let mut r = rng(seed);
    (uniform(&mut r, n, d, -1.5, 1.5), uniform(&mut r, n, c, -1.0, 1.0))
}

fn spec(stages: &[(f64, usize)], batch: usize) -> TrainSpec {
    TrainSpec {
        lr_schedule: stages.iter().map(|&(lr, epochs)| LrStage { lr, epochs }).collect(),
        batch_size: batch,
        dropout_hidden: 0.0,
        dropout_input: 0.0,
        weight_reg: WeightReg::None,
        loss: LossKind::Mse,
        seed: 9,
    }
}

#[test]
fn backward_matches_differences_for_every_operator_set() {
    let (x, y) = toy_data(1, 12, 4, 2);
    let mut failures = Vec::new();
    let mut skipped_total = 0;
    for op in enumerate_operator_sets() {
        let mut r = rng(op.index() as u64 + 100);
        let net = one_layer_net(&mut r, &[op], &x, 3, 2);
        let sel = TrainableSelection {
            include_norm: false,
            ..TrainableSelection::everything(&net)
        };
        let total = sel.parameters(&net).len();
        let (checked, worst) = check_all(&net, &x, &y, &sel, PassMode::Inference);
        skipped_total += total - checked;
        if worst > 1e-4 || checked * 2 < total {
            failures.push(format!("{op}: worst {worst:.2e}, checked {checked}/{total}"));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
    assert!(skipped_total < 144 * 23 / 10, "too many kink exclusions: {skipped_total}");
}

#[test]
fn batchnorm_training_gradients_match_differences() {
    let (x, y) = toy_data(2, 16, 3, 2);
    let ops = [
        OperatorSet::PERCEPTRON,
        OperatorSet::from_index(7).unwrap(),
        OperatorSet::from_index(77).unwrap(),
        OperatorSet::from_index(130).unwrap(),
    ];
    let mut r = rng(3);
    let mut net = one_layer_net(&mut r, &ops, &x, 8, 2);
    init_batchnorm_from_standardization(&mut net.layers_mut()[0], 0).unwrap();
    let sel = TrainableSelection::everything(&net);
    let (checked, worst) = check_all(&net, &x, &y, &sel, PassMode::Training);
    assert!(checked > sel.parameters(&net).len() / 2);
    assert!(worst < 1e-4, "worst {worst:e}");
}

#[test]
fn unselected_blocks_stay_frozen() {
    let (x, y) = toy_data(4, 40, 3, 2);
    let mut r = rng(5);
    let ops = [OperatorSet::PERCEPTRON, OperatorSet::from_index(40).unwrap()];
    let mut net = one_layer_net(&mut r, &ops, &x, 8, 2);
    let before = net.clone();
    let s = spec(&[(0.05, 5)], 8);
    finetune(&mut net, DataRef { x: x.view(), y: y.view() }, None, &s, &TrainableSelection::new_block(0, 1)).unwrap();
    let (b0, a0) = (&before.layers()[0], &net.layers()[0]);
    assert_eq!(b0.blocks()[0], a0.blocks()[0]);
    assert_ne!(b0.blocks()[1], a0.blocks()[1]);
    assert_eq!(a0.norm().mode, NormMode::BatchNorm);
    for j in 0..4 {
        assert_eq!(a0.norm().mean[j], b0.norm().mean[j]);
        assert_eq!(a0.norm().std[j], b0.norm().std[j]);
        assert_eq!(a0.norm().scale[j], 1.0);
        assert_eq!(a0.norm().shift[j], 0.0);
    }
}

#[test]
fn zero_learning_rate_leaves_output_unchanged() {
    let (x, y) = toy_data(6, 30, 3, 2);
    let mut r = rng(7);
    let mut net = one_layer_net(&mut r, &[OperatorSet::from_index(90).unwrap()], &x, 6, 2);
    let before = net.clone();
    let log = finetune(
        &mut net,
        DataRef { x: x.view(), y: y.view() },
        Some(DataRef { x: x.view(), y: y.view() }),
        &spec(&[(0.0, 3)], 7),
        &TrainableSelection::output_only(),
    )
    .unwrap();
    assert_eq!(net, before);
    assert_eq!(log.epochs.len(), 3);
    assert!(log.epochs.windows(2).all(|w| w[0].train_loss == w[1].train_loss));
}

#[test]
fn output_training_converges_to_least_squares() {
    let (x, y) = toy_data(8, 60, 3, 2);
    let mut r = rng(9);
    let mut net = one_layer_net(&mut r, &[OperatorSet::PERCEPTRON], &x, 5, 2);
    finetune(
        &mut net,
        DataRef { x: x.view(), y: y.view() },
        None,
        &spec(&[(0.1, 30000)], 60),
        &TrainableSelection::output_only(),
    )
    .unwrap();
    let h = net.features_before(x.view(), 1).unwrap();
    let ones = Array2::ones((h.nrows(), 1));
    let ha = concatenate(Axis(1), &[h.view(), ones.view()]).unwrap();
    let b = oracle_ridge(&ha, &y, 1e-12);
    let best = gop_core::ridge::mse(ha.dot(&b).view(), y.view());
    let got = evaluate(&net, x.view(), y.view(), LossKind::Mse).unwrap().loss;
    assert!(got >= best - 1e-9);
    assert!((got - best) / best < 1e-3, "sgd {got} vs optimum {best}");
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let (x, y) = toy_data(10, 50, 3, 2);
    let mut r = rng(11);
    let net = one_layer_net(&mut r, &[OperatorSet::from_index(33).unwrap()], &x, 6, 2);
    let mut s = spec(&[(0.02, 4), (0.002, 2)], 8);
    s.dropout_hidden = 0.3;
    s.dropout_input = 0.2;
    let run = |s: &TrainSpec| {
        let mut n = net.clone();
        let sel = TrainableSelection::everything(&n);
        finetune(&mut n, DataRef { x: x.view(), y: y.view() }, None, s, &sel).unwrap();
        n
    };
    let first = run(&s);
    assert_eq!(first, run(&s));
    s.seed += 1;
    assert_ne!(first, run(&s));
}

#[test]
fn max_norm_bounds_selected_columns() {
    let (x, y) = toy_data(12, 40, 4, 2);
    let mut r = rng(13);
    let mut net = one_layer_net(&mut r, &[OperatorSet::PERCEPTRON], &x, 6, 2);
    for w in net.layers_mut()[0].blocks_mut()[0].weights.iter_mut() {
        *w *= 5.0;
    }
    let mut s = spec(&[(0.5, 3)], 8);
    s.weight_reg = WeightReg::MaxNorm(0.5);
    let sel = TrainableSelection::everything(&net);
    finetune(&mut net, DataRef { x: x.view(), y: y.view() }, None, &s, &sel).unwrap();
    for col in net.layers()[0].blocks()[0].weights.columns() {
        assert!(col.dot(&col).sqrt() <= 0.5 + 1e-12);
    }
}

#[test]
fn divergence_is_reported() {
    let (x, y) = toy_data(14, 20, 2, 2);
    let mut r = rng(15);
    let mut net = one_layer_net(&mut r, &[OperatorSet::PERCEPTRON], &x, 4, 2);
    let err = finetune(
        &mut net,
        DataRef { x: x.view(), y: y.view() },
        None,
        &spec(&[(1e200, 50)], 20),
        &TrainableSelection::output_only(),
    )
    .unwrap_err();
    assert!(matches!(err, GopError::NonFiniteLoss { .. }), "{err:?}");
}
