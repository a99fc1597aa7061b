//! Mini-batch gradient finetuning of selected parameters.
//!
//! Gradients follow the chain rule through the nodal, pooling and
//! activation operators of every GOP block, through per-column
//! normalization (batch statistics for trainable batch-norm columns,
//! frozen statistics otherwise) and through the linear read-out.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GopError, Result};
use crate::network::{GopLayer, GopNetwork, NeuronBlock, NormMode, STD_FLOOR};
use crate::ridge::{accuracy, mse};
use crate::scalar::Real;

/// Momentum of the batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.9;
/// Added to the batch variance before taking the square root.
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrStage {
    pub lr: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightReg {
    None,
    /// L2 penalty `lambda / 2 * |w|^2` on weights.
    Decay(f64),
    /// Projects each neuron's incoming weight vector onto the ball of the
    /// given radius after every step.
    MaxNorm(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Squared error summed over outputs, averaged over samples.
    Mse,
    CrossEntropySoftmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSpec {
    pub lr_schedule: Vec<LrStage>,
    pub batch_size: usize,
    pub dropout_hidden: f64,
    pub dropout_input: f64,
    pub weight_reg: WeightReg,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            lr_schedule: vec![
                LrStage { lr: 0.01, epochs: 20 },
                LrStage { lr: 0.001, epochs: 40 },
                LrStage { lr: 0.0001, epochs: 40 },
            ],
            batch_size: 32,
            dropout_hidden: 0.3,
            dropout_input: 0.2,
            weight_reg: WeightReg::MaxNorm(2.0),
            loss: LossKind::Mse,
            seed: 0,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GopError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        for p in [self.dropout_hidden, self.dropout_input] {
            if !(0.0..1.0).contains(&p) {
                return bad("dropout rates must lie in [0, 1)");
            }
        }
        let mut prev = f64::INFINITY;
        for st in &self.lr_schedule {
            if !(st.lr >= 0.0) || !st.lr.is_finite() {
                return bad("learning rates must be finite and non-negative");
            }
            if st.lr > prev {
                return bad("learning rates must be non-increasing across stages");
            }
            if st.epochs == 0 {
                return bad("every schedule stage needs at least one epoch");
            }
            prev = st.lr;
        }
        match self.weight_reg {
            WeightReg::Decay(l) if !(l >= 0.0) => bad("weight decay must be non-negative"),
            WeightReg::MaxNorm(m) if !(m > 0.0) => bad("max-norm radius must be positive"),
            _ => Ok(()),
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.lr_schedule.iter().map(|s| s.epochs).sum()
    }
}

/// Which parameters a finetune may change.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainableSelection {
    /// `(layer_index, block_index)` pairs.
    pub blocks: BTreeSet<(usize, usize)>,
    pub include_output: bool,
    /// Batch-norm scale/shift of the selected blocks' columns.
    pub include_norm: bool,
}

impl TrainableSelection {
    pub fn output_only() -> Self {
        TrainableSelection {
            blocks: BTreeSet::new(),
            include_output: true,
            include_norm: false,
        }
    }

    /// One block together with its normalization and the read-out.
    pub fn new_block(layer: usize, block: usize) -> Self {
        TrainableSelection {
            blocks: [(layer, block)].into_iter().collect(),
            include_output: true,
            include_norm: true,
        }
    }

    pub fn everything<T: Real>(net: &GopNetwork<T>) -> Self {
        let blocks = net
            .layers()
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| (0..layer.blocks().len()).map(move |b| (l, b)))
            .collect();
        TrainableSelection {
            blocks,
            include_output: true,
            include_norm: true,
        }
    }

    pub fn validate<T: Real>(&self, net: &GopNetwork<T>) -> Result<()> {
        for &(l, b) in &self.blocks {
            let ok = net.layers().get(l).is_some_and(|layer| b < layer.blocks().len());
            if !ok {
                return Err(GopError::Config(format!("selected block ({l}, {b}) does not exist")));
            }
        }
        Ok(())
    }

    fn has_block_in_layer(&self, l: usize) -> bool {
        self.blocks.range((l, 0)..(l + 1, 0)).next().is_some()
    }

    fn lowest_layer(&self) -> Option<usize> {
        self.blocks.iter().next().map(|&(l, _)| l)
    }

    /// Every selected scalar, in a fixed order.
    pub fn parameters<T: Real>(&self, net: &GopNetwork<T>) -> Vec<ParamId> {
        let mut out = Vec::new();
        for &(l, b) in &self.blocks {
            let layer = &net.layers()[l];
            let block = &layer.blocks()[b];
            for r in 0..block.fan_in() {
                for c in 0..block.width() {
                    out.push(ParamId::BlockWeight { layer: l, block: b, row: r, col: c });
                }
            }
            for i in 0..block.width() {
                out.push(ParamId::BlockBias { layer: l, block: b, index: i });
            }
            if self.include_norm {
                let off = layer.block_offsets()[b];
                for j in off..off + block.width() {
                    out.push(ParamId::NormScale { layer: l, column: j });
                    out.push(ParamId::NormShift { layer: l, column: j });
                }
            }
        }
        if self.include_output {
            let w = net.output_weights();
            for r in 0..w.nrows() {
                for c in 0..w.ncols() {
                    out.push(ParamId::OutputWeight { row: r, col: c });
                }
            }
            for c in 0..net.num_outputs() {
                out.push(ParamId::OutputBias { index: c });
            }
        }
        out
    }
}

/// Address of one trainable scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    BlockWeight { layer: usize, block: usize, row: usize, col: usize },
    BlockBias { layer: usize, block: usize, index: usize },
    NormScale { layer: usize, column: usize },
    NormShift { layer: usize, column: usize },
    OutputWeight { row: usize, col: usize },
    OutputBias { index: usize },
}

pub fn param<T: Real>(net: &GopNetwork<T>, id: ParamId) -> T {
    match id {
        ParamId::BlockWeight { layer, block, row, col } => net.layers()[layer].blocks()[block].weights[[row, col]],
        ParamId::BlockBias { layer, block, index } => net.layers()[layer].blocks()[block].bias[index],
        ParamId::NormScale { layer, column } => net.layers()[layer].norm().scale[column],
        ParamId::NormShift { layer, column } => net.layers()[layer].norm().shift[column],
        ParamId::OutputWeight { row, col } => net.output_weights()[[row, col]],
        ParamId::OutputBias { index } => net.output_bias()[index],
    }
}

pub fn param_mut<T: Real>(net: &mut GopNetwork<T>, id: ParamId) -> &mut T {
    match id {
        ParamId::BlockWeight { layer, block, row, col } => {
            &mut net.layers_mut()[layer].blocks_mut()[block].weights[[row, col]]
        }
        ParamId::BlockBias { layer, block, index } => &mut net.layers_mut()[layer].blocks_mut()[block].bias[index],
        ParamId::NormScale { layer, column } => &mut net.layers_mut()[layer].norm_mut().scale[column],
        ParamId::NormShift { layer, column } => &mut net.layers_mut()[layer].norm_mut().shift[column],
        ParamId::OutputWeight { row, col } => &mut net.output_weights_mut()[[row, col]],
        ParamId::OutputBias { index } => &mut net.output_bias_mut()[index],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrad<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
    /// Present when normalization parameters are selected.
    pub scale: Option<Array1<T>>,
    pub shift: Option<Array1<T>>,
}

/// Loss and its gradient with respect to the selected parameters only.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub loss: T,
    pub blocks: BTreeMap<(usize, usize), BlockGrad<T>>,
    pub output: Option<(Array2<T>, Array1<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of one scalar, `None` if it was not selected.
    pub fn get<N: Real>(&self, net: &GopNetwork<N>, id: ParamId) -> Option<T> {
        match id {
            ParamId::BlockWeight { layer, block, row, col } => {
                self.blocks.get(&(layer, block)).map(|g| g.weights[[row, col]])
            }
            ParamId::BlockBias { layer, block, index } => self.blocks.get(&(layer, block)).map(|g| g.bias[index]),
            ParamId::NormScale { layer, column } | ParamId::NormShift { layer, column } => {
                let l = &net.layers()[layer];
                let offsets = l.block_offsets();
                let b = offsets.iter().rposition(|&o| o <= column)?;
                let g = self.blocks.get(&(layer, b))?;
                let j = column - offsets[b];
                match id {
                    ParamId::NormScale { .. } => g.scale.as_ref().map(|v| v[j]),
                    _ => g.shift.as_ref().map(|v| v[j]),
                }
            }
            ParamId::OutputWeight { row, col } => self.output.as_ref().map(|(w, _)| w[[row, col]]),
            ParamId::OutputBias { index } => self.output.as_ref().map(|(_, b)| b[index]),
        }
    }
}

/// Whether trainable batch-norm columns use batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassMode {
    Inference,
    Training,
}

struct LayerTrace<T> {
    input: Array2<T>,
    pre: Array2<T>,
    xhat: Array2<T>,
    inv_std: Array1<T>,
    batch_cols: Vec<bool>,
    batch_mean: Array1<T>,
    batch_var: Array1<T>,
    mask: Option<Array2<T>>,
}

struct Trace<T> {
    layers: Vec<LayerTrace<T>>,
    hidden: Array2<T>,
    pred: Array2<T>,
}

struct Dropout<'a> {
    rng: &'a mut ChaCha8Rng,
    input: f64,
    hidden: f64,
}

fn dropout_mask<T: Real>(rng: &mut ChaCha8Rng, shape: (usize, usize), p: f64) -> Array2<T> {
    let keep = T::of(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { T::zero() } else { keep })
}

fn selected_columns<T: Real>(layer: &GopLayer<T>, l: usize, sel: &TrainableSelection) -> Vec<bool> {
    let mut cols = vec![false; layer.width()];
    let offsets = layer.block_offsets();
    for (b, block) in layer.blocks().iter().enumerate() {
        if sel.blocks.contains(&(l, b)) {
            cols[offsets[b]..offsets[b] + block.width()].fill(true);
        }
    }
    cols
}

fn forward_trace<T: Real>(
    net: &GopNetwork<T>,
    x: ArrayView2<'_, T>,
    mode: PassMode,
    sel: &TrainableSelection,
    mut dropout: Option<Dropout<'_>>,
) -> Result<Trace<T>> {
    if x.ncols() != net.input_dim() {
        return Err(GopError::dims("network input columns", net.input_dim(), x.ncols()));
    }
    let n = x.nrows();
    let nt = T::from_usize(n.max(1)).unwrap();
    let eps = T::of(BN_EPS);
    let mut h = x.to_owned();
    if let Some(d) = dropout.as_mut() {
        if d.input > 0.0 {
            h *= &dropout_mask::<T>(d.rng, h.dim(), d.input);
        }
    }
    let mut layers = Vec::with_capacity(net.layers().len());
    for (l, layer) in net.layers().iter().enumerate() {
        let norm = layer.norm();
        if !norm.is_fitted_for(layer.width()) {
            return Err(GopError::UnfitNormalization { layer: l });
        }
        let w = layer.width();
        let mut pre = Array2::zeros((n, w));
        let mut act = Array2::zeros((n, w));
        let mut off = 0;
        for block in layer.blocks() {
            let p = block.pre_activation(h.view())?;
            let f = block.op_set.activation;
            act.slice_mut(s![.., off..off + block.width()]).assign(&p.mapv(|v| f.forward(v)));
            pre.slice_mut(s![.., off..off + block.width()]).assign(&p);
            off += block.width();
        }
        let sel_cols = selected_columns(layer, l, sel);
        let batch_cols: Vec<bool> = sel_cols
            .iter()
            .map(|&c| c && sel.include_norm && mode == PassMode::Training && norm.mode == NormMode::BatchNorm)
            .collect();
        let mut xhat = act;
        let mut inv_std = Array1::zeros(w);
        let mut batch_mean = Array1::zeros(w);
        let mut batch_var = Array1::zeros(w);
        let mut out = Array2::zeros((n, w));
        for j in 0..w {
            let (m, istd) = if batch_cols[j] {
                let col = xhat.column(j);
                let m = col.sum() / nt;
                let var = col.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / nt;
                batch_mean[j] = m;
                batch_var[j] = var;
                (m, T::one() / (var + eps).sqrt())
            } else {
                (norm.mean[j], T::one() / norm.std[j])
            };
            inv_std[j] = istd;
            let (a, b) = (norm.scale[j], norm.shift[j]);
            let mut xc = xhat.column_mut(j);
            xc.mapv_inplace(|v| (v - m) * istd);
            out.column_mut(j).assign(&xc.mapv(|v| a * v + b));
        }
        let mask = match dropout.as_mut() {
            Some(d) if d.hidden > 0.0 => {
                let m = dropout_mask::<T>(d.rng, out.dim(), d.hidden);
                out *= &m;
                Some(m)
            }
            _ => None,
        };
        layers.push(LayerTrace {
            input: std::mem::replace(&mut h, out),
            pre,
            xhat,
            inv_std,
            batch_cols,
            batch_mean,
            batch_var,
            mask,
        });
    }
    let pred = net.read_out(h.view());
    Ok(Trace { layers, hidden: h, pred })
}

/// Loss value and `dL/dpred`.
fn loss_and_grad<T: Real>(pred: ArrayView2<'_, T>, y: ArrayView2<'_, T>, kind: LossKind) -> (T, Array2<T>) {
    let n = T::from_usize(pred.nrows().max(1)).unwrap();
    match kind {
        LossKind::Mse => {
            let diff = &pred - &y;
            let loss = diff.iter().map(|&d| d * d).sum::<T>() / n;
            (loss, diff.mapv(|d| T::of(2.0) * d / n))
        }
        LossKind::CrossEntropySoftmax => {
            let mut grad = Array2::zeros(pred.dim());
            let mut loss = T::zero();
            for (r, row) in pred.outer_iter().enumerate() {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
                let lz = z.ln() + mx;
                for (c, &v) in row.iter().enumerate() {
                    let p = (v - lz).exp();
                    let t = y[[r, c]];
                    loss -= t * (v - lz);
                    grad[[r, c]] = (p - t) / n;
                }
            }
            (loss / n, grad)
        }
    }
}

pub fn loss_value<T: Real>(pred: ArrayView2<'_, T>, y: ArrayView2<'_, T>, kind: LossKind) -> T {
    match kind {
        LossKind::Mse => mse(pred, y),
        LossKind::CrossEntropySoftmax => loss_and_grad(pred, y, kind).0,
    }
}

fn backward_block<T: Real>(
    block: &NeuronBlock<T>,
    input: &Array2<T>,
    dpre: ArrayView2<'_, T>,
    want_params: bool,
    dinput: Option<&mut Array2<T>>,
) -> (Array2<T>, Array1<T>) {
    let fan_in = block.fan_in();
    let mut dw = Array2::zeros((fan_in, block.width()));
    let mut db = Array1::zeros(block.width());
    let nodal = block.op_set.nodal;
    let pool = block.op_set.pool;
    let mut w = vec![T::zero(); fan_in];
    let mut z = vec![T::zero(); fan_in];
    let mut pg = vec![T::zero(); fan_in];
    let mut dwcol = vec![T::zero(); fan_in];
    let mut dinput = dinput;
    for i in 0..block.width() {
        for (dst, src) in w.iter_mut().zip(block.weights.column(i)) {
            *dst = *src;
        }
        dwcol.fill(T::zero());
        let mut dbi = T::zero();
        for (r, y) in input.outer_iter().enumerate() {
            let g = dpre[[r, i]];
            if g == T::zero() {
                continue;
            }
            for ((zk, &wk), &yk) in z.iter_mut().zip(&w).zip(y.iter()) {
                *zk = nodal.forward(wk, yk);
            }
            pool.grad_into(&z, &mut pg);
            dbi += g;
            for k in 0..fan_in {
                let gz = g * pg[k];
                if gz == T::zero() {
                    continue;
                }
                let (dzw, dzy) = nodal.grad(w[k], y[k]);
                dwcol[k] += gz * dzw;
                if let Some(di) = dinput.as_deref_mut() {
                    di[[r, k]] += gz * dzy;
                }
            }
        }
        if want_params {
            for k in 0..fan_in {
                dw[[k, i]] = dwcol[k];
            }
            db[i] = dbi;
        }
    }
    (dw, db)
}

fn backward_trace<T: Real>(
    net: &GopNetwork<T>,
    trace: &Trace<T>,
    y: ArrayView2<'_, T>,
    sel: &TrainableSelection,
    loss: LossKind,
) -> Gradients<T> {
    let (loss_v, dpred) = loss_and_grad(trace.pred.view(), y, loss);
    let output = sel
        .include_output
        .then(|| (trace.hidden.t().dot(&dpred), dpred.sum_axis(Axis(0))));
    let mut blocks = BTreeMap::new();
    let Some(lowest) = sel.lowest_layer() else {
        return Gradients { loss: loss_v, blocks, output };
    };
    let nt = T::from_usize(trace.pred.nrows().max(1)).unwrap();
    let mut dout = dpred.dot(&net.output_weights().t());
    for l in (lowest..net.layers().len()).rev() {
        let layer = &net.layers()[l];
        let lt = &trace.layers[l];
        let norm = layer.norm();
        if let Some(m) = &lt.mask {
            dout *= m;
        }
        let sel_cols = selected_columns(layer, l, sel);
        let w = layer.width();
        let mut dscale = Array1::zeros(w);
        let mut dshift = Array1::zeros(w);
        let mut dact = Array2::zeros(dout.dim());
        for j in 0..w {
            let dy = dout.column(j);
            let xh = lt.xhat.column(j);
            if sel.include_norm && sel_cols[j] {
                dscale[j] = dy.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum();
                dshift[j] = dy.sum();
            }
            let a = norm.scale[j];
            let istd = lt.inv_std[j];
            let mut dc = dact.column_mut(j);
            if lt.batch_cols[j] {
                let sum_dx: T = dy.iter().map(|&v| v * a).sum();
                let sum_dx_xh: T = dy.iter().zip(xh.iter()).map(|(&v, &x)| v * a * x).sum();
                for (r, d) in dc.iter_mut().enumerate() {
                    let dxh = dy[r] * a;
                    *d = istd * (dxh - sum_dx / nt - xh[r] * sum_dx_xh / nt);
                }
            } else {
                for (r, d) in dc.iter_mut().enumerate() {
                    *d = dy[r] * a * istd;
                }
            }
        }
        let need_input = l > lowest;
        let mut dinput = need_input.then(|| Array2::zeros(lt.input.dim()));
        let offsets = layer.block_offsets();
        for (b, block) in layer.blocks().iter().enumerate() {
            let selected = sel.blocks.contains(&(l, b));
            if !selected && !need_input {
                continue;
            }
            let off = offsets[b];
            let cols = off..off + block.width();
            let f = block.op_set.activation;
            let mut dpre = dact.slice(s![.., cols.clone()]).to_owned();
            dpre.zip_mut_with(&lt.pre.slice(s![.., cols.clone()]), |d, &p| *d *= f.grad(p));
            let (dw, db) = backward_block(block, &lt.input, dpre.view(), selected, dinput.as_mut());
            if selected {
                let (scale, shift) = if sel.include_norm {
                    (
                        Some(dscale.slice(s![cols.clone()]).to_owned()),
                        Some(dshift.slice(s![cols]).to_owned()),
                    )
                } else {
                    (None, None)
                };
                blocks.insert((l, b), BlockGrad { weights: dw, bias: db, scale, shift });
            }
        }
        match dinput {
            Some(d) => dout = d,
            None => break,
        }
        // Layers below `lowest` are never reached; `has_block_in_layer`
        // keeps the loop honest for sparse selections.
        debug_assert!(l > lowest || sel.has_block_in_layer(l));
    }
    Gradients { loss: loss_v, blocks, output }
}

/// Exact gradient of the batch loss with respect to the selected
/// parameters. No dropout is applied.
pub fn backward<T: Real>(
    net: &GopNetwork<T>,
    x: ArrayView2<'_, T>,
    y: ArrayView2<'_, T>,
    sel: &TrainableSelection,
    loss: LossKind,
    mode: PassMode,
) -> Result<Gradients<T>> {
    if x.nrows() == 0 {
        return Err(GopError::EmptyInput("empty batch"));
    }
    if y.nrows() != x.nrows() {
        return Err(GopError::dims("target rows", x.nrows(), y.nrows()));
    }
    if y.ncols() != net.num_outputs() {
        return Err(GopError::dims("target columns", net.num_outputs(), y.ncols()));
    }
    sel.validate(net)?;
    let trace = forward_trace(net, x, mode, sel, None)?;
    Ok(backward_trace(net, &trace, y, sel, loss))
}

/// Batch loss evaluated the way [`backward`] sees it.
pub fn batch_loss<T: Real>(
    net: &GopNetwork<T>,
    x: ArrayView2<'_, T>,
    y: ArrayView2<'_, T>,
    sel: &TrainableSelection,
    loss: LossKind,
    mode: PassMode,
) -> Result<T> {
    let trace = forward_trace(net, x, mode, sel, None)?;
    Ok(loss_and_grad(trace.pred.view(), y, loss).0)
}

/// Switches a standardized layer to batch-norm mode with the fitted
/// statistics as running statistics and an identity affine part. A layer
/// already in batch-norm mode is left untouched.
pub fn init_batchnorm_from_standardization<T: Real>(layer: &mut GopLayer<T>, layer_index: usize) -> Result<()> {
    let w = layer.width();
    let norm = layer.norm_mut();
    if !norm.is_fitted_for(w) {
        return Err(GopError::UnfitNormalization { layer: layer_index });
    }
    if norm.mode == NormMode::BatchNorm {
        return Ok(());
    }
    norm.mode = NormMode::BatchNorm;
    norm.scale = Array1::ones(w);
    norm.shift = Array1::zeros(w);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
}

pub fn evaluate<T: Real>(net: &GopNetwork<T>, x: ArrayView2<'_, T>, y: ArrayView2<'_, T>, loss: LossKind) -> Result<Metrics> {
    let pred = net.forward(x)?;
    Ok(Metrics {
        loss: loss_value(pred.view(), y, loss).to_f64_lossy(),
        accuracy: accuracy(pred.view(), y).to_f64_lossy(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: usize,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub final_val: Option<Metrics>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "phase,stage,epoch,lr,train_loss,train_accuracy,val_loss,val_accuracy";

    /// CSV rows (no header) tagged with `phase`.
    pub fn csv_rows(&self, phase: &str) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&format!(
                "{phase},{},{},{},{},{},{},{}\n",
                e.stage,
                e.epoch,
                e.lr,
                e.train_loss,
                e.train_accuracy,
                opt(e.val_loss),
                opt(e.val_accuracy)
            ));
        }
        out
    }
}

/// A labelled design matrix with one-hot (or regression) targets.
#[derive(Debug, Clone, Copy)]
pub struct DataRef<'a, T> {
    pub x: ArrayView2<'a, T>,
    pub y: ArrayView2<'a, T>,
}

/// Mini-batch SGD over `spec.lr_schedule`, updating only `sel`.
///
/// Dropout is applied to the inputs and to every hidden layer output during
/// training only. Layers owning selected blocks are switched to batch-norm
/// mode first when `sel.include_norm` is set.
pub fn finetune<T: Real>(
    net: &mut GopNetwork<T>,
    train: DataRef<'_, T>,
    val: Option<DataRef<'_, T>>,
    spec: &TrainSpec,
    sel: &TrainableSelection,
) -> Result<TrainLog> {
    spec.validate()?;
    sel.validate(net)?;
    if train.x.nrows() == 0 {
        return Err(GopError::EmptyInput("empty training set"));
    }
    if sel.include_norm {
        let layers: BTreeSet<usize> = sel.blocks.iter().map(|&(l, _)| l).collect();
        for l in layers {
            init_batchnorm_from_standardization(&mut net.layers_mut()[l], l)?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = train.x.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::default();
    let momentum = T::of(BN_MOMENTUM);
    let floor = T::of(STD_FLOOR);
    let mut epoch_index = 0;
    for (stage, st) in spec.lr_schedule.iter().enumerate() {
        let lr = T::of(st.lr);
        for _ in 0..st.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(spec.batch_size) {
                let xb = train.x.select(Axis(0), chunk);
                let yb = train.y.select(Axis(0), chunk);
                let trace = forward_trace(
                    net,
                    xb.view(),
                    PassMode::Training,
                    sel,
                    Some(Dropout {
                        rng: &mut rng,
                        input: spec.dropout_input,
                        hidden: spec.dropout_hidden,
                    }),
                )?;
                let grads = backward_trace(net, &trace, yb.view(), sel, spec.loss);
                if !grads.loss.is_finite() {
                    return Err(GopError::NonFiniteLoss { epoch: epoch_index });
                }
                apply_update(net, &grads, lr, spec.weight_reg);
                // Running statistics of batch-normalized columns.
                for (l, lt) in trace.layers.iter().enumerate() {
                    if !lt.batch_cols.iter().any(|&c| c) {
                        continue;
                    }
                    let norm = net.layers_mut()[l].norm_mut();
                    for (j, _) in lt.batch_cols.iter().enumerate().filter(|(_, &c)| c) {
                        norm.mean[j] = momentum * norm.mean[j] + (T::one() - momentum) * lt.batch_mean[j];
                        let var = momentum * norm.std[j] * norm.std[j] + (T::one() - momentum) * lt.batch_var[j];
                        norm.std[j] = var.sqrt().max(floor);
                    }
                }
            }
            let tm = evaluate(net, train.x, train.y, spec.loss)?;
            if !tm.loss.is_finite() {
                return Err(GopError::NonFiniteLoss { epoch: epoch_index });
            }
            let vm = val.map(|v| evaluate(net, v.x, v.y, spec.loss)).transpose()?;
            log.epochs.push(EpochLog {
                stage,
                epoch: epoch_index,
                lr: st.lr,
                train_loss: tm.loss,
                train_accuracy: tm.accuracy,
                val_loss: vm.map(|m| m.loss),
                val_accuracy: vm.map(|m| m.accuracy),
            });
            epoch_index += 1;
        }
    }
    log.final_val = val.map(|v| evaluate(net, v.x, v.y, spec.loss)).transpose()?;
    Ok(log)
}

fn apply_update<T: Real>(net: &mut GopNetwork<T>, grads: &Gradients<T>, lr: T, reg: WeightReg) {
    let decay = match reg {
        WeightReg::Decay(l) => T::of(l),
        _ => T::zero(),
    };
    for (&(l, b), g) in &grads.blocks {
        let offset = net.layers()[l].block_offsets()[b];
        let layer = &mut net.layers_mut()[l];
        {
            let block = &mut layer.blocks_mut()[b];
            block
                .weights
                .zip_mut_with(&g.weights, |w, &d| *w = *w - lr * (d + decay * *w));
            block.bias.zip_mut_with(&g.bias, |w, &d| *w = *w - lr * d);
            if let WeightReg::MaxNorm(m) = reg {
                let m = T::of(m);
                for mut col in block.weights.axis_iter_mut(Axis(1)) {
                    let norm = col.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if norm > m {
                        let f = m / norm;
                        col.mapv_inplace(|v| v * f);
                    }
                }
            }
        }
        let norm = layer.norm_mut();
        if let Some(ds) = &g.scale {
            for (j, &d) in ds.iter().enumerate() {
                norm.scale[offset + j] = norm.scale[offset + j] - lr * d;
            }
        }
        if let Some(ds) = &g.shift {
            for (j, &d) in ds.iter().enumerate() {
                norm.shift[offset + j] = norm.shift[offset + j] - lr * d;
            }
        }
    }
    if let Some((gw, gb)) = &grads.output {
        net.output_weights_mut()
            .zip_mut_with(gw, |w, &d| *w = *w - lr * (d + decay * *w));
        net.output_bias_mut().zip_mut_with(gb, |w, &d| *w = *w - lr * d);
    }
}
