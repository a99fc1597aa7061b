//! Model size and inference cost.
//!
//! Parameters count synaptic weights and biases only; normalization
//! statistics and batch-norm scale/shift are excluded.
//!
//! FLOPs use a fixed per-scalar-operation table: add, multiply, negate and
//! compare cost 1; exp, log, sin, tanh and division cost 4. A sigmoid
//! evaluation is one transcendental (4). Normalization is folded into one
//! multiply-add per hidden unit.

use crate::network::{GopLayer, GopNetwork, NeuronBlock};
use crate::operators::{ActivationOp, NodalOp, OperatorSet, PoolOp};
use crate::scalar::Real;

pub const FLOP_BASIC: u64 = 1;
pub const FLOP_TRANSCENDENTAL: u64 = 4;

const B: u64 = FLOP_BASIC;
const X: u64 = FLOP_TRANSCENDENTAL;

pub fn nodal_flops(op: NodalOp) -> u64 {
    match op {
        // w*y
        NodalOp::Multiplication => B,
        // exp(w*y) - 1
        NodalOp::Exponential => B + X + B,
        // sin(w*y)
        NodalOp::Harmonic => B + X,
        // w*(y*y)
        NodalOp::Quadratic => 2 * B,
        // w * exp(-(w*(y*y)))
        NodalOp::Gaussian => 3 * B + X + B,
        // (w*y) * exp(-(w*(y*y)))
        NodalOp::DoG => 3 * B + X + 2 * B,
    }
}

pub fn pool_flops(op: PoolOp, fan_in: usize) -> u64 {
    let n = fan_in as u64;
    match op {
        PoolOp::Summation => n.saturating_sub(1) * B,
        PoolOp::Correlation1 => (n.saturating_sub(1) + n.saturating_sub(2)) * B,
        PoolOp::Correlation2 => (2 * n.saturating_sub(2) + n.saturating_sub(3)) * B,
        PoolOp::Maximum => n.saturating_sub(1) * B,
    }
}

pub fn activation_flops(op: ActivationOp) -> u64 {
    match op {
        ActivationOp::Sigmoid => X,
        ActivationOp::Tanh => X,
        ActivationOp::ReLU => B,
        // log(1 + exp(-x))
        ActivationOp::Softplus => B + X + B + X,
        // x / (1 + |x|)
        ActivationOp::InverseAbsolute => B + B + X,
        // compare, then exp on the negative branch
        ActivationOp::ELU => B + X,
    }
}

/// FLOPs of one neuron with the given operator set and fan-in, bias
/// included.
pub fn neuron_flops(op: OperatorSet, fan_in: usize) -> u64 {
    fan_in as u64 * nodal_flops(op.nodal) + pool_flops(op.pool, fan_in) + B + activation_flops(op.activation)
}

pub fn block_params<T: Real>(block: &NeuronBlock<T>) -> usize {
    block.fan_in() * block.width() + block.width()
}

pub fn block_flops<T: Real>(block: &NeuronBlock<T>) -> u64 {
    block.width() as u64 * neuron_flops(block.op_set, block.fan_in())
}

pub fn layer_flops<T: Real>(layer: &GopLayer<T>) -> u64 {
    layer.blocks().iter().map(block_flops).sum::<u64>() + 2 * B * layer.width() as u64
}

/// Synaptic weights and biases of hidden blocks plus the output map.
pub fn count_params<T: Real>(net: &GopNetwork<T>) -> usize {
    let hidden: usize = net
        .layers()
        .iter()
        .flat_map(|l| l.blocks())
        .map(block_params)
        .sum();
    let out = net.output_weights().len() + net.output_bias().len();
    hidden + out
}

/// Per-sample inference FLOPs.
pub fn count_flops<T: Real>(net: &GopNetwork<T>) -> u64 {
    let hidden: u64 = net.layers().iter().map(layer_flops).sum();
    // d multiplies, d - 1 adds and one bias add per output.
    let d = net.output_weights().nrows() as u64;
    hidden + net.num_outputs() as u64 * 2 * d * B
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NormState;
    use ndarray::{Array1, Array2};

    fn net_with_blocks(input: usize, widths: &[usize], classes: usize, op: OperatorSet) -> GopNetwork<f64> {
        let blocks = widths
            .iter()
            .map(|&w| NeuronBlock::new(op, Array2::zeros((input, w)), Array1::zeros(w)).unwrap())
            .collect::<Vec<_>>();
        let total: usize = widths.iter().sum();
        let layer = GopLayer::new(blocks, NormState::identity(total)).unwrap();
        GopNetwork::new(input, vec![layer], Array2::zeros((total, classes)), Array1::zeros(classes)).unwrap()
    }

    #[test]
    fn params_of_single_layer() {
        let net = net_with_blocks(8, &[40], 2, OperatorSet::PERCEPTRON);
        assert_eq!(count_params(&net), 442);
    }

    #[test]
    fn adding_a_block_adds_its_params() {
        let a = net_with_blocks(8, &[40], 2, OperatorSet::PERCEPTRON);
        let b = net_with_blocks(8, &[40, 20], 2, OperatorSet::PERCEPTRON);
        assert_eq!(count_params(&b) - count_params(&a), 220);
    }

    #[test]
    fn perceptron_neuron_flops() {
        for n in [1usize, 2, 8, 100] {
            let expected = n as u64 + (n as u64 - 1) + 1 + 4;
            assert_eq!(neuron_flops(OperatorSet::PERCEPTRON, n), expected);
        }
    }

    #[test]
    fn maximum_pool_comparisons() {
        assert_eq!(pool_flops(PoolOp::Maximum, 7), 6);
        assert_eq!(pool_flops(PoolOp::Correlation2, 2), 0);
    }

    #[test]
    fn flops_linear_in_width() {
        let op = OperatorSet::new(NodalOp::DoG, PoolOp::Correlation1, ActivationOp::Softplus);
        let a = net_with_blocks(5, &[10], 3, op);
        let b = net_with_blocks(5, &[20], 3, op);
        assert_eq!(layer_flops(&b.layers()[0]), 2 * layer_flops(&a.layers()[0]));
    }
}
