#![allow(dead_code)]

use gop_core::train::{batch_loss, param, param_mut, LossKind, ParamId, PassMode, TrainableSelection};
use gop_core::{GopLayer, GopNetwork, NeuronBlock, OperatorSet};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
}

pub fn block(rng: &mut ChaCha8Rng, op: OperatorSet, fan_in: usize, width: usize) -> NeuronBlock<f64> {
    let w = uniform(rng, fan_in, width, -1.0, 1.0);
    let b = Array1::from_shape_simple_fn(width, || rng.random_range(-0.5..0.5));
    NeuronBlock::new(op, w, b).unwrap()
}

/// `dim -> [width] -> outputs` with one block per entry of `ops`, each
/// `width / ops.len()` wide, normalization fitted on `x`.
pub fn one_layer_net(
    rng: &mut ChaCha8Rng,
    ops: &[OperatorSet],
    x: &Array2<f64>,
    width: usize,
    outputs: usize,
) -> GopNetwork<f64> {
    let per = width / ops.len();
    let blocks: Vec<_> = ops.iter().map(|&op| block(rng, op, x.ncols(), per)).collect();
    let mut parts = Vec::new();
    for b in &blocks {
        parts.push(b.forward(x.view()).unwrap());
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let h = ndarray::concatenate(ndarray::Axis(1), &views).unwrap();
    let norm = gop_core::NormState::fit(h.view());
    let layer = GopLayer::new(blocks, norm).unwrap();
    let wout = uniform(rng, layer.width(), outputs, -0.5, 0.5);
    let bout = Array1::from_shape_simple_fn(outputs, || rng.random_range(-0.1..0.1));
    GopNetwork::new(x.ncols(), vec![layer], wout, bout).unwrap()
}

/// Central difference of the batch loss along `id`.
pub fn numeric_grad(
    net: &GopNetwork<f64>,
    x: &Array2<f64>,
    y: &Array2<f64>,
    sel: &TrainableSelection,
    mode: PassMode,
    id: ParamId,
    h: f64,
) -> f64 {
    let mut n = net.clone();
    let base = param(net, id);
    *param_mut(&mut n, id) = base + h;
    let up = batch_loss(&n, x.view(), y.view(), sel, LossKind::Mse, mode).unwrap();
    *param_mut(&mut n, id) = base - h;
    let down = batch_loss(&n, x.view(), y.view(), sel, LossKind::Mse, mode).unwrap();
    (up - down) / (2.0 * h)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `(H^T H + cI)^-1 H^T Y` by nalgebra LU, independent of the crate's solver.
pub fn oracle_ridge(h: &Array2<f64>, y: &Array2<f64>, c: f64) -> Array2<f64> {
    let hm = nalgebra::DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| h[[i, j]]);
    let ym = nalgebra::DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| y[[i, j]]);
    let a = hm.transpose() * &hm + nalgebra::DMatrix::identity(h.ncols(), h.ncols()) * c;
    let b = a.lu().solve(&(hm.transpose() * ym)).expect("oracle system is regular");
    Array2::from_shape_fn((b.nrows(), b.ncols()), |(i, j)| b[(i, j)])
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
