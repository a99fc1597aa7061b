//! Generalized operational perceptron (GOP) networks.
//!
//! A GOP neuron replaces the multiply/sum/activate pipeline of a perceptron
//! with a nodal operator, a pooling operator and an activation picked from a
//! fixed library of 144 combinations. Networks are grown block by block and
//! layer by layer: every candidate block is scored with a closed-form ridge
//! read-out, the best one is finetuned by backpropagation, and growth stops
//! when the relative improvement falls below a threshold.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the
//! aliases below pin the common `f64` case.

pub mod baselines;
pub mod cost;
pub mod data;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model_io;
pub mod network;
pub mod operators;
pub mod progression;
pub mod ridge;
pub mod scalar;
pub mod train;

pub use error::{GopError, Result};
pub use network::{GopLayer, GopNetwork, NeuronBlock, NormMode, NormState};
pub use operators::{ActivationOp, NodalOp, OperatorSet, PoolOp, LIBRARY_SIZE};
pub use progression::{run_progression, ProgressionConfig, ProgressionReport, Variant};
pub use scalar::Real;
pub use train::{finetune, TrainSpec, TrainableSelection};

pub type Network = GopNetwork<f64>;
pub type Layer = GopLayer<f64>;
pub type Block = NeuronBlock<f64>;
pub type Network32 = GopNetwork<f32>;
pub type Layer32 = GopLayer<f32>;
pub type Block32 = NeuronBlock<f32>;
