//! The fixed operator library: 6 nodal, 4 pooling and 6 activation
//! operators, giving 144 operator sets.
//!
//! A GOP neuron computes, for inputs `y_k` and weights `w_k`,
//!
//! ```text
//! z_k = nodal(y_k, w_k)
//! x   = pool(z_1, .., z_n) + b
//! out = activation(x)
//! ```
//!
//! Every formula is implemented exactly as listed in the library table,
//! including the non-standard `softplus(x) = log(1 + exp(-x))` and
//! `elu(x) = exp(x)` for `x < 0`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{GopError, Result};
use crate::scalar::Real;

/// Argument bound applied before `exp` in the exponential nodal operator.
pub const EXP_CLAMP: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodalOp {
    Multiplication,
    Exponential,
    Harmonic,
    Quadratic,
    Gaussian,
    #[serde(rename = "dog")]
    DoG,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PoolOp {
    #[serde(rename = "summation")]
    Summation,
    #[serde(rename = "1-correlation")]
    Correlation1,
    #[serde(rename = "2-correlation")]
    Correlation2,
    #[serde(rename = "maximum")]
    Maximum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationOp {
    Sigmoid,
    Tanh,
    #[serde(rename = "relu")]
    ReLU,
    Softplus,
    InverseAbsolute,
    #[serde(rename = "elu")]
    ELU,
}

impl NodalOp {
    pub const ALL: [NodalOp; 6] = [
        NodalOp::Multiplication,
        NodalOp::Exponential,
        NodalOp::Harmonic,
        NodalOp::Quadratic,
        NodalOp::Gaussian,
        NodalOp::DoG,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn token(self) -> &'static str {
        match self {
            NodalOp::Multiplication => "multiplication",
            NodalOp::Exponential => "exponential",
            NodalOp::Harmonic => "harmonic",
            NodalOp::Quadratic => "quadratic",
            NodalOp::Gaussian => "gaussian",
            NodalOp::DoG => "dog",
        }
    }

    /// `z = psi(y, w)`.
    #[inline]
    pub fn forward<T: Real>(self, w: T, y: T) -> T {
        match self {
            NodalOp::Multiplication => w * y,
            NodalOp::Exponential => {
                let lim = T::of(EXP_CLAMP);
                (w * y).max(-lim).min(lim).exp() - T::one()
            }
            NodalOp::Harmonic => (w * y).sin(),
            NodalOp::Quadratic => w * y * y,
            NodalOp::Gaussian => w * (-w * y * y).exp(),
            NodalOp::DoG => w * y * (-w * y * y).exp(),
        }
    }

    /// Returns `(dz/dw, dz/dy)`.
    #[inline]
    pub fn grad<T: Real>(self, w: T, y: T) -> (T, T) {
        match self {
            NodalOp::Multiplication => (y, w),
            NodalOp::Exponential => {
                let a = w * y;
                let lim = T::of(EXP_CLAMP);
                // Outside the clamp the output is constant.
                if a > lim || a < -lim {
                    (T::zero(), T::zero())
                } else {
                    let e = a.exp();
                    (y * e, w * e)
                }
            }
            NodalOp::Harmonic => {
                let c = (w * y).cos();
                (y * c, w * c)
            }
            NodalOp::Quadratic => (y * y, T::of(2.0) * w * y),
            NodalOp::Gaussian => {
                let y2 = y * y;
                let e = (-w * y2).exp();
                (e * (T::one() - w * y2), -T::of(2.0) * w * w * y * e)
            }
            NodalOp::DoG => {
                let y2 = y * y;
                let e = (-w * y2).exp();
                (
                    y * e * (T::one() - w * y2),
                    w * e * (T::one() - T::of(2.0) * w * y2),
                )
            }
        }
    }
}

impl PoolOp {
    pub const ALL: [PoolOp; 4] = [
        PoolOp::Summation,
        PoolOp::Correlation1,
        PoolOp::Correlation2,
        PoolOp::Maximum,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn token(self) -> &'static str {
        match self {
            PoolOp::Summation => "summation",
            PoolOp::Correlation1 => "1-correlation",
            PoolOp::Correlation2 => "2-correlation",
            PoolOp::Maximum => "maximum",
        }
    }

    pub fn forward<T: Real>(self, z: &[T]) -> Result<T> {
        if z.is_empty() {
            return Err(GopError::EmptyInput("pooling over zero inputs"));
        }
        Ok(self.forward_unchecked(z))
    }

    /// Same as [`PoolOp::forward`] for callers that guarantee `z` is non-empty.
    #[inline]
    pub(crate) fn forward_unchecked<T: Real>(self, z: &[T]) -> T {
        match self {
            PoolOp::Summation => z.iter().copied().sum(),
            PoolOp::Correlation1 => z.windows(2).map(|p| p[0] * p[1]).sum(),
            PoolOp::Correlation2 => z.windows(3).map(|p| p[0] * p[1] * p[2]).sum(),
            PoolOp::Maximum => z[1..].iter().fold(z[0], |m, &v| if v > m { v } else { m }),
        }
    }

    pub fn grad<T: Real>(self, z: &[T]) -> Result<Vec<T>> {
        if z.is_empty() {
            return Err(GopError::EmptyInput("pooling over zero inputs"));
        }
        let mut out = vec![T::zero(); z.len()];
        self.grad_into(z, &mut out);
        Ok(out)
    }

    /// Writes `d pool / d z_k` into `out`. `out.len()` must equal `z.len()`.
    #[inline]
    pub(crate) fn grad_into<T: Real>(self, z: &[T], out: &mut [T]) {
        let n = z.len();
        match self {
            PoolOp::Summation => out.fill(T::one()),
            PoolOp::Correlation1 => {
                out.fill(T::zero());
                for k in 0..n.saturating_sub(1) {
                    out[k] += z[k + 1];
                    out[k + 1] += z[k];
                }
            }
            PoolOp::Correlation2 => {
                out.fill(T::zero());
                for k in 0..n.saturating_sub(2) {
                    out[k] += z[k + 1] * z[k + 2];
                    out[k + 1] += z[k] * z[k + 2];
                    out[k + 2] += z[k] * z[k + 1];
                }
            }
            PoolOp::Maximum => {
                out.fill(T::zero());
                let mut arg = 0;
                for k in 1..n {
                    if z[k] > z[arg] {
                        arg = k;
                    }
                }
                out[arg] = T::one();
            }
        }
    }
}

impl ActivationOp {
    pub const ALL: [ActivationOp; 6] = [
        ActivationOp::Sigmoid,
        ActivationOp::Tanh,
        ActivationOp::ReLU,
        ActivationOp::Softplus,
        ActivationOp::InverseAbsolute,
        ActivationOp::ELU,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn token(self) -> &'static str {
        match self {
            ActivationOp::Sigmoid => "sigmoid",
            ActivationOp::Tanh => "tanh",
            ActivationOp::ReLU => "relu",
            ActivationOp::Softplus => "softplus",
            ActivationOp::InverseAbsolute => "inverse-absolute",
            ActivationOp::ELU => "elu",
        }
    }

    #[inline]
    pub fn forward<T: Real>(self, x: T) -> T {
        match self {
            ActivationOp::Sigmoid => sigmoid(x),
            ActivationOp::Tanh => x.tanh(),
            ActivationOp::ReLU => x.max(T::zero()),
            // log(1 + exp(-x)), evaluated without overflow for large -x.
            ActivationOp::Softplus => (-x).max(T::zero()) + (-x.abs()).exp().ln_1p(),
            ActivationOp::InverseAbsolute => x / (T::one() + x.abs()),
            ActivationOp::ELU => {
                if x >= T::zero() {
                    x
                } else {
                    x.exp()
                }
            }
        }
    }

    /// Derivative of [`ActivationOp::forward`]. Kinks: `relu'(0) = 0`,
    /// `elu'(0) = 1`.
    #[inline]
    pub fn grad<T: Real>(self, x: T) -> T {
        match self {
            ActivationOp::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            ActivationOp::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            ActivationOp::ReLU => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            ActivationOp::Softplus => -sigmoid(-x),
            ActivationOp::InverseAbsolute => {
                let d = T::one() + x.abs();
                T::one() / (d * d)
            }
            ActivationOp::ELU => {
                if x >= T::zero() {
                    T::one()
                } else {
                    x.exp()
                }
            }
        }
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Number of operator sets in the library.
pub const LIBRARY_SIZE: usize = 6 * 4 * 6;

/// A `(nodal, pool, activation)` triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OperatorSet {
    pub nodal: NodalOp,
    pub pool: PoolOp,
    pub activation: ActivationOp,
}

impl OperatorSet {
    pub const PERCEPTRON: OperatorSet = OperatorSet {
        nodal: NodalOp::Multiplication,
        pool: PoolOp::Summation,
        activation: ActivationOp::Sigmoid,
    };

    pub fn new(nodal: NodalOp, pool: PoolOp, activation: ActivationOp) -> Self {
        OperatorSet {
            nodal,
            pool,
            activation,
        }
    }

    /// Position in the library: `nodal * 24 + pool * 6 + activation`.
    pub fn index(&self) -> usize {
        self.nodal.index() * 24 + self.pool.index() * 6 + self.activation.index()
    }

    pub fn from_index(index: usize) -> Option<Self> {
        if index >= LIBRARY_SIZE {
            return None;
        }
        Some(OperatorSet {
            nodal: NodalOp::ALL[index / 24],
            pool: PoolOp::ALL[(index / 6) % 4],
            activation: ActivationOp::ALL[index % 6],
        })
    }
}

impl fmt::Display for OperatorSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {})",
            self.nodal.token(),
            self.pool.token(),
            self.activation.token()
        )
    }
}

/// All 144 operator sets in lexicographic `(nodal, pool, activation)` order.
pub fn enumerate_operator_sets() -> Vec<OperatorSet> {
    let mut out = Vec::with_capacity(LIBRARY_SIZE);
    for nodal in NodalOp::ALL {
        for pool in PoolOp::ALL {
            for activation in ActivationOp::ALL {
                out.push(OperatorSet::new(nodal, pool, activation));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn nodal_examples() {
        assert_eq!(NodalOp::Multiplication.forward(0.5, 2.0), 1.0);
        assert_eq!(NodalOp::Exponential.forward(0.0, 7.3), 0.0);
        assert_eq!(NodalOp::Gaussian.forward(0.0, 1.0), 0.0);
        assert_relative_eq!(NodalOp::Harmonic.forward(1.0, FRAC_PI_2), 1.0);
        assert_eq!(NodalOp::Multiplication.grad(0.5, 2.0), (2.0, 0.5));
        assert_eq!(NodalOp::Quadratic.grad(1.0, 3.0), (9.0, 6.0));
    }

    #[test]
    fn exponential_saturates() {
        let big = NodalOp::Exponential.forward(10.0f64, 100.0);
        assert!(big.is_finite());
        assert_eq!(big, 50f64.exp() - 1.0);
        assert_eq!(NodalOp::Exponential.grad(10.0f64, 100.0), (0.0, 0.0));
    }

    #[test]
    fn dog_grad_matches_central_difference() {
        let (w, y, h) = (0.7f64, -0.4f64, 1e-5);
        let (dw, dy) = NodalOp::DoG.grad(w, y);
        let fdw = (NodalOp::DoG.forward(w + h, y) - NodalOp::DoG.forward(w - h, y)) / (2.0 * h);
        let fdy = (NodalOp::DoG.forward(w, y + h) - NodalOp::DoG.forward(w, y - h)) / (2.0 * h);
        assert_relative_eq!(dw, fdw, max_relative = 1e-6);
        assert_relative_eq!(dy, fdy, max_relative = 1e-6);
    }

    #[test]
    fn pool_examples() {
        assert_eq!(PoolOp::Summation.forward(&[1.0, 2.0, 3.0]).unwrap(), 6.0);
        assert_eq!(PoolOp::Correlation1.forward(&[1.0, 2.0, 3.0]).unwrap(), 8.0);
        assert_eq!(PoolOp::Maximum.forward(&[-1.0, 3.0, 2.0]).unwrap(), 3.0);
        assert_eq!(PoolOp::Correlation2.forward(&[5.0, 7.0]).unwrap(), 0.0);
        assert_eq!(PoolOp::Correlation1.forward(&[5.0]).unwrap(), 0.0);
        assert!(matches!(
            PoolOp::Summation.forward::<f64>(&[]),
            Err(GopError::EmptyInput(_))
        ));
        assert!(matches!(
            PoolOp::Maximum.grad::<f64>(&[]),
            Err(GopError::EmptyInput(_))
        ));
    }

    #[test]
    fn pool_grad_examples() {
        assert_eq!(PoolOp::Summation.grad(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0; 3]);
        assert_eq!(
            PoolOp::Correlation1.grad(&[1.0, 2.0, 3.0]).unwrap(),
            vec![2.0, 4.0, 2.0]
        );
        assert_eq!(
            PoolOp::Maximum.grad(&[-1.0, 3.0, 3.0]).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
        assert_eq!(
            PoolOp::Correlation2.grad(&[2.0, 3.0, 5.0, 7.0]).unwrap(),
            vec![15.0, 10.0 + 35.0, 6.0 + 21.0, 15.0]
        );
    }

    #[test]
    fn correlation_is_order_sensitive() {
        let a = [1.0, 2.0, 3.0];
        let b = [2.0, 1.0, 3.0];
        assert_eq!(PoolOp::Correlation1.forward(&a).unwrap(), 8.0);
        assert_eq!(PoolOp::Correlation1.forward(&b).unwrap(), 5.0);
        let c = [1.0, 2.0, 3.0, 4.0];
        let d = [4.0, 1.0, 2.0, 3.0];
        assert_ne!(
            PoolOp::Correlation2.forward(&c).unwrap(),
            PoolOp::Correlation2.forward(&d).unwrap()
        );
    }

    #[test]
    fn activation_examples() {
        assert_eq!(ActivationOp::Sigmoid.forward(0.0), 0.5);
        assert_eq!(ActivationOp::ReLU.forward(-2.0), 0.0);
        assert_eq!(ActivationOp::InverseAbsolute.forward(1.0), 0.5);
        assert_relative_eq!(ActivationOp::ELU.forward(-1.0f64), 0.36788, epsilon = 1e-5);
        assert_relative_eq!(ActivationOp::Softplus.forward(0.0f64), 2f64.ln());
        assert_eq!(ActivationOp::Sigmoid.grad(0.0), 0.25);
        assert_eq!(ActivationOp::ReLU.grad(3.0), 1.0);
        assert_eq!(ActivationOp::ReLU.grad(0.0), 0.0);
        assert_eq!(ActivationOp::ELU.grad(0.0), 1.0);
    }

    #[test]
    fn softplus_is_stable_in_both_tails() {
        let lo: f64 = ActivationOp::Softplus.forward(-800.0);
        let hi: f64 = ActivationOp::Softplus.forward(800.0);
        assert_relative_eq!(lo, 800.0);
        assert!(hi >= 0.0 && hi < 1e-300);
    }

    #[test]
    fn tanh_grad_matches_central_difference() {
        let (x, h) = (0.8f64, 1e-5);
        let fd = (ActivationOp::Tanh.forward(x + h) - ActivationOp::Tanh.forward(x - h)) / (2.0 * h);
        assert_relative_eq!(ActivationOp::Tanh.grad(x), fd, max_relative = 1e-6);
    }

    #[test]
    fn library_enumeration() {
        let all = enumerate_operator_sets();
        assert_eq!(all.len(), 144);
        assert_eq!(
            all[0],
            OperatorSet::new(NodalOp::Multiplication, PoolOp::Summation, ActivationOp::Sigmoid)
        );
        assert_eq!(
            all[143],
            OperatorSet::new(NodalOp::DoG, PoolOp::Maximum, ActivationOp::ELU)
        );
        for (i, op) in all.iter().enumerate() {
            assert_eq!(op.index(), i);
            assert_eq!(OperatorSet::from_index(i), Some(*op));
        }
        assert_eq!(OperatorSet::from_index(144), None);
        assert_eq!(OperatorSet::PERCEPTRON.index(), 0);
    }

    #[test]
    fn tokens_match_serde_names() {
        for op in NodalOp::ALL {
            assert_eq!(serde_json::to_string(&op).unwrap(), format!("\"{}\"", op.token()));
        }
        for op in PoolOp::ALL {
            assert_eq!(serde_json::to_string(&op).unwrap(), format!("\"{}\"", op.token()));
        }
        for op in ActivationOp::ALL {
            assert_eq!(serde_json::to_string(&op).unwrap(), format!("\"{}\"", op.token()));
        }
    }
}
