//! Heterogeneous GOP layers and the network that chains them into a linear
//! read-out.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{GopError, Result};
use crate::operators::OperatorSet;
use crate::scalar::Real;

/// Lower bound applied to every stored standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

/// A group of neurons sharing one operator set.
///
/// `weights` is `fan_in x width`: column `i` holds the incoming weights of
/// neuron `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronBlock<T> {
    pub op_set: OperatorSet,
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> NeuronBlock<T> {
    pub fn new(op_set: OperatorSet, weights: Array2<T>, bias: Array1<T>) -> Result<Self> {
        let block = NeuronBlock {
            op_set,
            weights,
            bias,
        };
        block.validate()?;
        Ok(block)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fan_in() == 0 {
            return Err(GopError::EmptyInput("neuron block with zero fan-in"));
        }
        if self.width() == 0 {
            return Err(GopError::EmptyInput("neuron block with zero width"));
        }
        if self.bias.len() != self.width() {
            return Err(GopError::dims("block bias", self.width(), self.bias.len()));
        }
        if !self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite()) {
            return Err(GopError::Config("block parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn fan_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn width(&self) -> usize {
        self.weights.ncols()
    }

    /// Pooled and biased values `x` (before the activation), `N x width`.
    pub fn pre_activation(&self, inputs: ArrayView2<'_, T>) -> Result<Array2<T>> {
        if inputs.ncols() != self.fan_in() {
            return Err(GopError::dims("block input columns", self.fan_in(), inputs.ncols()));
        }
        let n = inputs.nrows();
        let mut out = Array2::zeros((n, self.width()));
        let mut w = vec![T::zero(); self.fan_in()];
        let mut z = vec![T::zero(); self.fan_in()];
        let nodal = self.op_set.nodal;
        let pool = self.op_set.pool;
        for i in 0..self.width() {
            for (dst, src) in w.iter_mut().zip(self.weights.column(i)) {
                *dst = *src;
            }
            let b = self.bias[i];
            for (row, y) in inputs.outer_iter().enumerate() {
                for ((zk, &wk), &yk) in z.iter_mut().zip(&w).zip(y.iter()) {
                    *zk = nodal.forward(wk, yk);
                }
                out[[row, i]] = pool.forward_unchecked(&z) + b;
            }
        }
        Ok(out)
    }

    /// Block output before normalization, `N x width`.
    pub fn forward(&self, inputs: ArrayView2<'_, T>) -> Result<Array2<T>> {
        let act = self.op_set.activation;
        let mut x = self.pre_activation(inputs)?;
        x.mapv_inplace(|v| act.forward(v));
        Ok(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    Standardize,
    BatchNorm,
}

/// Per-column affine normalization `scale * (h - mean) / std + shift`.
///
/// In `Standardize` mode `scale` is all ones and `shift` all zeros. In
/// `BatchNorm` mode `mean`/`std` are the running statistics used at
/// inference.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState<T> {
    pub mode: NormMode,
    pub mean: Array1<T>,
    pub std: Array1<T>,
    pub scale: Array1<T>,
    pub shift: Array1<T>,
}

impl<T: Real> NormState<T> {
    /// Standardization with no statistics yet.
    pub fn unfitted() -> Self {
        NormState {
            mode: NormMode::Standardize,
            mean: Array1::zeros(0),
            std: Array1::zeros(0),
            scale: Array1::zeros(0),
            shift: Array1::zeros(0),
        }
    }

    pub fn identity(width: usize) -> Self {
        Self::standardize(Array1::zeros(width), Array1::ones(width))
    }

    pub fn standardize(mean: Array1<T>, std: Array1<T>) -> Self {
        let width = mean.len();
        let floor = T::of(STD_FLOOR);
        NormState {
            mode: NormMode::Standardize,
            mean,
            std: std.mapv(|s| s.max(floor)),
            scale: Array1::ones(width),
            shift: Array1::zeros(width),
        }
    }

    /// Column means and population standard deviations of `h`.
    pub fn fit(h: ArrayView2<'_, T>) -> Self {
        let (mean, std) = column_moments(h);
        Self::standardize(mean, std)
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn is_fitted_for(&self, width: usize) -> bool {
        self.mean.len() == width
            && self.std.len() == width
            && self.scale.len() == width
            && self.shift.len() == width
    }

    /// Applies the inference-time transform in place.
    pub fn apply_inplace(&self, h: &mut Array2<T>) {
        for (j, mut col) in h.axis_iter_mut(Axis(1)).enumerate() {
            let a = self.scale[j] / self.std[j];
            let m = self.mean[j];
            let b = self.shift[j];
            col.mapv_inplace(|v| a * (v - m) + b);
        }
    }

    /// Appends the statistics of another state, e.g. when a block joins a
    /// layer. The mode of `self` is kept.
    pub(crate) fn append(&mut self, other: &NormState<T>) {
        let cat = |a: &Array1<T>, b: &Array1<T>| {
            let mut v = a.to_vec();
            v.extend(b.iter().copied());
            Array1::from(v)
        };
        self.mean = cat(&self.mean, &other.mean);
        self.std = cat(&self.std, &other.std);
        self.scale = cat(&self.scale, &other.scale);
        self.shift = cat(&self.shift, &other.shift);
    }
}

/// Column means and population standard deviations, the latter floored at
/// [`STD_FLOOR`].
pub fn column_moments<T: Real>(h: ArrayView2<'_, T>) -> (Array1<T>, Array1<T>) {
    let n = T::from_usize(h.nrows().max(1)).unwrap();
    let floor = T::of(STD_FLOOR);
    let mean = h.sum_axis(Axis(0)) / n;
    let mut std = Array1::zeros(h.ncols());
    for (j, col) in h.axis_iter(Axis(1)).enumerate() {
        let m = mean[j];
        let var = col.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / n;
        std[j] = var.sqrt().max(floor);
    }
    (mean, std)
}

/// One hidden layer: blocks side by side, normalized jointly.
#[derive(Debug, Clone, PartialEq)]
pub struct GopLayer<T> {
    blocks: Vec<NeuronBlock<T>>,
    norm: NormState<T>,
}

impl<T: Real> GopLayer<T> {
    pub fn new(blocks: Vec<NeuronBlock<T>>, norm: NormState<T>) -> Result<Self> {
        let layer = GopLayer { blocks, norm };
        layer.validate()?;
        Ok(layer)
    }

    /// A single-block layer whose normalization is fitted on `inputs`.
    pub fn fitted(block: NeuronBlock<T>, inputs: ArrayView2<'_, T>) -> Result<Self> {
        let h = block.forward(inputs)?;
        let norm = NormState::fit(h.view());
        GopLayer::new(vec![block], norm)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.blocks.first() else {
            return Err(GopError::EmptyInput("layer without blocks"));
        };
        for b in &self.blocks {
            b.validate()?;
            if b.fan_in() != first.fan_in() {
                return Err(GopError::dims("block fan-in within layer", first.fan_in(), b.fan_in()));
            }
        }
        let w = self.width();
        if self.norm.width() != 0 && !self.norm.is_fitted_for(w) {
            return Err(GopError::dims("normalization width", w, self.norm.width()));
        }
        Ok(())
    }

    pub fn blocks(&self) -> &[NeuronBlock<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [NeuronBlock<T>] {
        &mut self.blocks
    }

    pub fn norm(&self) -> &NormState<T> {
        &self.norm
    }

    pub fn norm_mut(&mut self) -> &mut NormState<T> {
        &mut self.norm
    }

    pub fn fan_in(&self) -> usize {
        self.blocks[0].fan_in()
    }

    pub fn width(&self) -> usize {
        self.blocks.iter().map(NeuronBlock::width).sum()
    }

    /// Column offset of each block inside the concatenated layer output.
    pub fn block_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.blocks
            .iter()
            .map(|b| {
                let o = off;
                off += b.width();
                o
            })
            .collect()
    }

    /// Appends a block together with the normalization statistics of its
    /// columns.
    pub fn push_block(&mut self, block: NeuronBlock<T>, norm: &NormState<T>) -> Result<()> {
        if block.fan_in() != self.fan_in() {
            return Err(GopError::dims("block fan-in", self.fan_in(), block.fan_in()));
        }
        if !norm.is_fitted_for(block.width()) {
            return Err(GopError::dims("block normalization", block.width(), norm.width()));
        }
        self.norm.append(norm);
        self.blocks.push(block);
        Ok(())
    }

    /// Concatenated block outputs before normalization.
    pub fn raw_forward(&self, inputs: ArrayView2<'_, T>) -> Result<Array2<T>> {
        let mut out = Array2::zeros((inputs.nrows(), self.width()));
        let mut off = 0;
        for b in &self.blocks {
            let h = b.forward(inputs)?;
            out.slice_mut(s![.., off..off + b.width()]).assign(&h);
            off += b.width();
        }
        Ok(out)
    }

    /// Normalized layer output (inference mode).
    pub fn forward(&self, inputs: ArrayView2<'_, T>, layer_index: usize) -> Result<Array2<T>> {
        if !self.norm.is_fitted_for(self.width()) {
            return Err(GopError::UnfitNormalization { layer: layer_index });
        }
        let mut h = self.raw_forward(inputs)?;
        self.norm.apply_inplace(&mut h);
        Ok(h)
    }
}

/// Hidden GOP layers followed by a linear map `H * B + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct GopNetwork<T> {
    input_dim: usize,
    hidden: Vec<GopLayer<T>>,
    output_weights: Array2<T>,
    output_bias: Array1<T>,
}

impl<T: Real> GopNetwork<T> {
    pub fn new(
        input_dim: usize,
        hidden: Vec<GopLayer<T>>,
        output_weights: Array2<T>,
        output_bias: Array1<T>,
    ) -> Result<Self> {
        let net = GopNetwork {
            input_dim,
            hidden,
            output_weights,
            output_bias,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(GopError::Config("a network needs at least one hidden layer".into()));
        }
        if self.input_dim == 0 {
            return Err(GopError::EmptyInput("network input dimension is zero"));
        }
        let mut dim = self.input_dim;
        for (l, layer) in self.hidden.iter().enumerate() {
            layer.validate()?;
            if layer.fan_in() != dim {
                return Err(GopError::dims(format!("layer {l} fan-in"), dim, layer.fan_in()));
            }
            dim = layer.width();
        }
        if self.output_weights.nrows() != dim {
            return Err(GopError::dims("output weight rows", dim, self.output_weights.nrows()));
        }
        if self.output_weights.ncols() == 0 {
            return Err(GopError::EmptyInput("network with zero outputs"));
        }
        if self.output_bias.len() != self.output_weights.ncols() {
            return Err(GopError::dims(
                "output bias",
                self.output_weights.ncols(),
                self.output_bias.len(),
            ));
        }
        if !self
            .output_weights
            .iter()
            .chain(self.output_bias.iter())
            .all(|v| v.is_finite())
        {
            return Err(GopError::Config("output parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_outputs(&self) -> usize {
        self.output_weights.ncols()
    }

    pub fn layers(&self) -> &[GopLayer<T>] {
        &self.hidden
    }

    pub fn layers_mut(&mut self) -> &mut [GopLayer<T>] {
        &mut self.hidden
    }

    pub fn output_weights(&self) -> &Array2<T> {
        &self.output_weights
    }

    pub fn output_bias(&self) -> &Array1<T> {
        &self.output_bias
    }

    pub fn output_weights_mut(&mut self) -> &mut Array2<T> {
        &mut self.output_weights
    }

    pub fn output_bias_mut(&mut self) -> &mut Array1<T> {
        &mut self.output_bias
    }

    /// Replaces the linear read-out.
    pub fn set_output(&mut self, weights: Array2<T>, bias: Array1<T>) -> Result<()> {
        let d = self.hidden.last().map(GopLayer::width).unwrap_or(0);
        if weights.nrows() != d {
            return Err(GopError::dims("output weight rows", d, weights.nrows()));
        }
        if bias.len() != weights.ncols() {
            return Err(GopError::dims("output bias", weights.ncols(), bias.len()));
        }
        self.output_weights = weights;
        self.output_bias = bias;
        Ok(())
    }

    /// Appends a hidden layer and its read-out. The previous read-out is
    /// dropped since the output map always hangs off the last layer.
    pub fn push_layer(
        &mut self,
        layer: GopLayer<T>,
        output_weights: Array2<T>,
        output_bias: Array1<T>,
    ) -> Result<()> {
        let dim = self.hidden.last().map(GopLayer::width).unwrap_or(self.input_dim);
        if layer.fan_in() != dim {
            return Err(GopError::dims("new layer fan-in", dim, layer.fan_in()));
        }
        self.hidden.push(layer);
        self.set_output(output_weights, output_bias)
    }

    pub fn last_layer_mut(&mut self) -> &mut GopLayer<T> {
        self.hidden.last_mut().expect("network has a hidden layer")
    }

    /// Normalized output of every hidden layer, in order.
    pub fn hidden_outputs(&self, inputs: ArrayView2<'_, T>) -> Result<Vec<Array2<T>>> {
        self.check_inputs(inputs)?;
        let mut outs: Vec<Array2<T>> = Vec::with_capacity(self.hidden.len());
        for (l, layer) in self.hidden.iter().enumerate() {
            let h = match outs.last() {
                None => layer.forward(inputs, l)?,
                Some(prev) => layer.forward(prev.view(), l)?,
            };
            outs.push(h);
        }
        Ok(outs)
    }

    /// Output of hidden layer `upto - 1` (or the inputs when `upto == 0`).
    pub fn features_before(&self, inputs: ArrayView2<'_, T>, upto: usize) -> Result<Array2<T>> {
        self.check_inputs(inputs)?;
        let mut h = inputs.to_owned();
        for (l, layer) in self.hidden.iter().take(upto).enumerate() {
            h = layer.forward(h.view(), l)?;
        }
        Ok(h)
    }

    pub fn forward(&self, inputs: ArrayView2<'_, T>) -> Result<Array2<T>> {
        let h = self.features_before(inputs, self.hidden.len())?;
        Ok(self.read_out(h.view()))
    }

    /// Applies the linear output map to last-layer features.
    pub fn read_out(&self, h: ArrayView2<'_, T>) -> Array2<T> {
        h.dot(&self.output_weights) + &self.output_bias
    }

    pub fn predict(&self, inputs: ArrayView2<'_, T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(self.forward(inputs)?.view()))
    }

    fn check_inputs(&self, inputs: ArrayView2<'_, T>) -> Result<()> {
        if inputs.ncols() != self.input_dim {
            return Err(GopError::dims("network input columns", self.input_dim, inputs.ncols()));
        }
        Ok(())
    }
}

/// Index of the largest entry in each row; the first one wins ties.
pub fn argmax_rows<T: Real>(m: ArrayView2<'_, T>) -> Vec<usize> {
    m.outer_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{ActivationOp, NodalOp, PoolOp};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn perceptron_block(w: Array2<f64>, b: Array1<f64>) -> NeuronBlock<f64> {
        NeuronBlock::new(OperatorSet::PERCEPTRON, w, b).unwrap()
    }

    #[test]
    fn sigmoid_block_at_origin() {
        let block = perceptron_block(array![[1.0], [1.0]], array![0.0]);
        let out = block.forward(array![[0.0, 0.0]].view()).unwrap();
        assert_eq!(out, array![[0.5]]);
    }

    #[test]
    fn quadratic_maximum_relu_block() {
        let op = OperatorSet::new(NodalOp::Quadratic, PoolOp::Maximum, ActivationOp::ReLU);
        let block = NeuronBlock::new(op, array![[1.0], [-1.0]], array![0.0]).unwrap();
        let out = block.forward(array![[2.0, 3.0]].view()).unwrap();
        assert_eq!(out, array![[4.0]]);
    }

    #[test]
    fn block_rejects_wrong_fan_in() {
        let block = perceptron_block(array![[1.0], [1.0]], array![0.0]);
        let err = block.forward(array![[0.0, 0.0, 1.0]].view()).unwrap_err();
        assert!(matches!(err, GopError::DimensionMismatch { .. }));
    }

    #[test]
    fn standardization_of_a_column() {
        let block = NeuronBlock::new(
            OperatorSet::new(NodalOp::Multiplication, PoolOp::Summation, ActivationOp::ReLU),
            array![[1.0]],
            array![0.0],
        )
        .unwrap();
        let x = array![[1.0], [2.0], [3.0]];
        let layer = GopLayer::fitted(block, x.view()).unwrap();
        let h = layer.forward(x.view(), 0).unwrap();
        let s = (2.0f64 / 3.0).sqrt();
        assert_abs_diff_eq!(h[[0, 0]], -1.0 / s, epsilon = 1e-12);
        assert_abs_diff_eq!(h[[1, 0]], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(h[[2, 0]], 1.0 / s, epsilon = 1e-12);
        assert_abs_diff_eq!(h[[2, 0]], 1.22474, epsilon = 1e-5);
    }

    #[test]
    fn identity_standardization_and_inverse_batchnorm() {
        let block = perceptron_block(array![[0.3, -1.0], [0.7, 0.2]], array![0.1, -0.4]);
        let x = array![[0.5, -1.5], [2.0, 0.25], [-0.75, 1.0]];
        let raw = block.forward(x.view()).unwrap();

        let ident = GopLayer::new(vec![block.clone()], NormState::identity(2)).unwrap();
        assert_eq!(ident.forward(x.view(), 0).unwrap(), raw);

        let mut bn = NormState::fit(raw.view());
        bn.mode = NormMode::BatchNorm;
        bn.scale = bn.std.clone();
        bn.shift = bn.mean.clone();
        let layer = GopLayer::new(vec![block], bn).unwrap();
        let out = layer.forward(x.view(), 0).unwrap();
        for (a, b) in out.iter().zip(raw.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn unfitted_norm_is_an_error() {
        let block = perceptron_block(array![[1.0]], array![0.0]);
        let layer = GopLayer::new(vec![block], NormState::unfitted()).unwrap();
        let err = layer.forward(array![[1.0]].view(), 3).unwrap_err();
        assert!(matches!(err, GopError::UnfitNormalization { layer: 3 }));
    }

    #[test]
    fn network_requires_a_hidden_layer() {
        let err = GopNetwork::<f64>::new(2, vec![], Array2::zeros((2, 2)), Array1::zeros(2))
            .unwrap_err();
        assert!(matches!(err, GopError::Config(_)));
    }

    #[test]
    fn identity_readout_reproduces_layer() {
        let block = perceptron_block(array![[0.3, -1.0], [0.7, 0.2]], array![0.1, -0.4]);
        let layer = GopLayer::new(vec![block], NormState::identity(2)).unwrap();
        let net =
            GopNetwork::new(2, vec![layer.clone()], Array2::eye(2), Array1::zeros(2)).unwrap();
        let x = array![[0.5, -1.5], [2.0, 0.25]];
        assert_eq!(net.forward(x.view()).unwrap(), layer.forward(x.view(), 0).unwrap());
    }

    #[test]
    fn two_class_readout_picks_sign() {
        // One ReLU unit passing the first input through; B = [1, -1].
        let op = OperatorSet::new(NodalOp::Multiplication, PoolOp::Summation, ActivationOp::ReLU);
        let block = NeuronBlock::new(op, array![[1.0]], array![0.0]).unwrap();
        let layer = GopLayer::new(vec![block], NormState::identity(1)).unwrap();
        let net = GopNetwork::new(1, vec![layer], array![[1.0, -1.0]], array![0.0, 0.0]).unwrap();
        assert_eq!(net.predict(array![[2.5]].view()).unwrap(), vec![0]);
    }

    #[test]
    fn argmax_first_wins_ties() {
        assert_eq!(argmax_rows(array![[1.0, 1.0], [0.0, 2.0]].view()), vec![0, 1]);
    }
}
