//! Layerwise POP and PMLP baselines.
//!
//! Each hidden layer is trained together with a GOP output layer of one
//! neuron per target, every neuron of a layer sharing one operator set.
//! POP picks the two operator sets by a two-pass greedy search: fix the
//! hidden set and try every output set, then fix the best output set and
//! try every hidden set, then repeat from the best hidden set. Every trial
//! is a short backpropagation run. Layers are added from a width template
//! until the training MSE reaches the target.
//!
//! In the returned network the GOP output layer is the last hidden layer
//! and the linear read-out is the identity.

use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{count_flops, count_params};
use crate::error::{GopError, Result};
use crate::network::{GopLayer, GopNetwork, NeuronBlock, NormState};
use crate::operators::{enumerate_operator_sets, OperatorSet};
use crate::progression::{derive_seed, guarded_finetune, threshold, FinalMetrics, OperatorHistogram, PhaseLog, ProgressionData};
use crate::scalar::Real;
use crate::train::{evaluate, finetune, DataRef, LossKind, LrStage, TrainSpec, TrainableSelection, WeightReg};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopConfig {
    /// Width of each hidden layer that may be added, in order.
    pub template: Vec<usize>,
    #[serde(with = "threshold")]
    pub target_mse: f64,
    /// Backpropagation epochs per candidate pair.
    pub epochs_per_candidate: usize,
    pub candidate_lr: f64,
    pub batch_size: usize,
    /// Final finetune of the whole network. Dropout is off by default.
    pub train_spec: TrainSpec,
    pub final_finetune: bool,
    pub library: Option<Vec<OperatorSet>>,
    pub seed: u64,
}

impl Default for PopConfig {
    fn default() -> Self {
        PopConfig {
            template: vec![200, 200],
            target_mse: 0.01,
            epochs_per_candidate: 20,
            candidate_lr: 0.01,
            batch_size: 32,
            train_spec: TrainSpec {
                dropout_hidden: 0.0,
                dropout_input: 0.0,
                ..TrainSpec::default()
            },
            final_finetune: true,
            library: None,
            seed: 0,
        }
    }
}

impl PopConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GopError::Config(m.to_string()));
        if self.template.is_empty() || self.template.contains(&0) {
            return bad("template must list positive layer widths");
        }
        if !(self.target_mse >= 0.0) {
            return bad("target_mse must be non-negative");
        }
        if self.epochs_per_candidate == 0 || self.batch_size == 0 {
            return bad("epochs_per_candidate and batch_size must be positive");
        }
        if let Some(lib) = &self.library {
            if lib.is_empty() {
                return bad("operator library is empty");
            }
        }
        self.candidate_spec(0).validate()?;
        self.train_spec.validate()
    }

    fn candidate_spec(&self, seed: u64) -> TrainSpec {
        TrainSpec {
            lr_schedule: vec![LrStage {
                lr: self.candidate_lr,
                epochs: self.epochs_per_candidate,
            }],
            batch_size: self.batch_size,
            dropout_hidden: 0.0,
            dropout_input: 0.0,
            weight_reg: WeightReg::None,
            loss: LossKind::Mse,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchSide {
    Output,
    Hidden,
}

/// One candidate training of the greedy search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTraining {
    pub layer_index: usize,
    pub pass: usize,
    pub side: SearchSide,
    pub hidden_op: OperatorSet,
    pub output_op: OperatorSet,
    /// `None` when the training diverged.
    pub train_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopLayerRecord {
    pub layer_index: usize,
    pub width: usize,
    pub hidden_op: OperatorSet,
    pub output_op: OperatorSet,
    pub train_mse: f64,
    pub candidate_trainings: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Pop,
    Pmlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopReport {
    pub method: BaselineKind,
    pub seed: u64,
    pub search: Vec<CandidateTraining>,
    pub layers: Vec<PopLayerRecord>,
    pub template_exhausted: bool,
    pub final_finetune_diverged: bool,
    pub final_metrics: FinalMetrics,
    pub params: usize,
    pub flops: u64,
    pub operator_histogram: OperatorHistogram,
    #[serde(skip)]
    pub train_logs: Vec<PhaseLog>,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl PopReport {
    pub fn candidate_trainings(&self) -> usize {
        self.layers.iter().map(|l| l.candidate_trainings).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn glorot_block<T: Real>(op_set: OperatorSet, fan_in: usize, width: usize, rng: &mut ChaCha8Rng) -> NeuronBlock<T> {
    let limit = (6.0 / (fan_in + width) as f64).sqrt();
    let weights = Array2::from_shape_simple_fn((fan_in, width), || T::of(rng.random_range(-limit..limit)));
    NeuronBlock {
        op_set,
        weights,
        bias: Array1::zeros(width),
    }
}

/// Two-layer network `features -> hidden(φh) -> output(φo)` with an
/// identity read-out.
fn shln<T: Real>(
    features: usize,
    width: usize,
    classes: usize,
    hidden_op: OperatorSet,
    output_op: OperatorSet,
    seed: u64,
) -> Result<GopNetwork<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = glorot_block(hidden_op, features, width, &mut rng);
    let out = glorot_block(output_op, width, classes, &mut rng);
    GopNetwork::new(
        features,
        vec![
            GopLayer::new(vec![hidden], NormState::identity(width))?,
            GopLayer::new(vec![out], NormState::identity(classes))?,
        ],
        Array2::eye(classes),
        Array1::zeros(classes),
    )
}

fn shln_selection() -> TrainableSelection {
    TrainableSelection {
        blocks: [(0, 0), (1, 0)].into_iter().collect(),
        include_output: false,
        include_norm: false,
    }
}

struct Trial<T> {
    net: GopNetwork<T>,
    mse: f64,
}

fn train_pair<T: Real>(
    features: ArrayView2<'_, T>,
    y: ArrayView2<'_, T>,
    width: usize,
    pair: (OperatorSet, OperatorSet),
    config: &PopConfig,
    layer_index: usize,
) -> Option<Trial<T>> {
    let seed = derive_seed(config.seed, &[layer_index as u64, pair.0.index() as u64, pair.1.index() as u64]);
    let mut net = shln::<T>(features.ncols(), width, y.ncols(), pair.0, pair.1, seed).ok()?;
    let spec = config.candidate_spec(seed);
    finetune(&mut net, DataRef { x: features, y }, None, &spec, &shln_selection()).ok()?;
    let mse = evaluate(&net, features, y, LossKind::Mse).ok()?.loss;
    mse.is_finite().then_some(Trial { net, mse })
}

/// Trains every pair in `pairs` and returns the best (lowest MSE, earliest
/// on ties) with its position.
fn sweep<T: Real>(
    features: ArrayView2<'_, T>,
    y: ArrayView2<'_, T>,
    width: usize,
    pairs: &[(OperatorSet, OperatorSet)],
    config: &PopConfig,
    layer_index: usize,
    pass: usize,
    side: SearchSide,
    log: &mut Vec<CandidateTraining>,
) -> Result<(usize, Trial<T>)> {
    let trials: Vec<Option<Trial<T>>> = pairs
        .par_iter()
        .map(|&p| train_pair(features, y, width, p, config, layer_index))
        .collect();
    let mut best: Option<(usize, Trial<T>)> = None;
    for (i, (trial, &(h, o))) in trials.into_iter().zip(pairs).enumerate() {
        log.push(CandidateTraining {
            layer_index,
            pass,
            side,
            hidden_op: h,
            output_op: o,
            train_mse: trial.as_ref().map(|t| t.mse),
        });
        if let Some(t) = trial {
            if best.as_ref().is_none_or(|(_, b)| t.mse < b.mse) {
                best = Some((i, t));
            }
        }
    }
    best.ok_or(GopError::AllCandidatesFailed)
}

fn run_layerwise<T: Real>(
    data: &ProgressionData<'_, T>,
    config: &PopConfig,
    kind: BaselineKind,
) -> Result<(GopNetwork<T>, PopReport)> {
    config.validate()?;
    let started = Instant::now();
    let train = data.train;
    if train.x.nrows() == 0 {
        return Err(GopError::EmptyInput("empty training split"));
    }
    let library = match kind {
        BaselineKind::Pop => config.library.clone().unwrap_or_else(enumerate_operator_sets),
        BaselineKind::Pmlp => vec![OperatorSet::PERCEPTRON],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[u64::MAX]));
    let mut frozen: Vec<GopLayer<T>> = Vec::new();
    let mut features = train.x.to_owned();
    let mut search = Vec::new();
    let mut layers = Vec::new();
    let mut last: Option<GopNetwork<T>> = None;
    let mut template_exhausted = true;

    for (l, &width) in config.template.iter().enumerate() {
        let before = search.len();
        let (trial, hidden_op, output_op, trainings) = match kind {
            BaselineKind::Pmlp => {
                let pair = (OperatorSet::PERCEPTRON, OperatorSet::PERCEPTRON);
                let t = train_pair(features.view(), train.y, width, pair, config, l).ok_or(GopError::AllCandidatesFailed)?;
                (t, pair.0, pair.1, 1)
            }
            BaselineKind::Pop => {
                let mut hidden = library[rng.random_range(0..library.len())];
                let mut output = library[0];
                let mut best = None;
                for pass in 1..=2 {
                    let pairs: Vec<_> = library.iter().map(|&o| (hidden, o)).collect();
                    let (i, _) = sweep(features.view(), train.y, width, &pairs, config, l, pass, SearchSide::Output, &mut search)?;
                    output = library[i];
                    let pairs: Vec<_> = library.iter().map(|&h| (h, output)).collect();
                    let (i, t) = sweep(features.view(), train.y, width, &pairs, config, l, pass, SearchSide::Hidden, &mut search)?;
                    hidden = library[i];
                    best = Some(t);
                }
                (best.expect("two passes ran"), hidden, output, search.len() - before)
            }
        };
        layers.push(PopLayerRecord {
            layer_index: l,
            width,
            hidden_op,
            output_op,
            train_mse: trial.mse,
            candidate_trainings: trainings,
        });
        let mut shln_layers = trial.net.layers().to_vec();
        let hidden_layer = shln_layers.remove(0);
        let output_layer = shln_layers.remove(0);
        let mut all = frozen.clone();
        all.push(hidden_layer.clone());
        all.push(output_layer);
        let c = train.y.ncols();
        last = Some(GopNetwork::new(train.x.ncols(), all, Array2::eye(c), Array1::zeros(c))?);
        if trial.mse <= config.target_mse {
            template_exhausted = false;
            break;
        }
        features = hidden_layer.forward(features.view(), l)?;
        frozen.push(hidden_layer);
    }
    let mut net = last.expect("template is non-empty");

    let mut train_logs = Vec::new();
    let mut final_diverged = false;
    if config.final_finetune {
        let spec = TrainSpec {
            seed: derive_seed(config.seed, &[u64::MAX - 1]),
            ..config.train_spec.clone()
        };
        let sel = TrainableSelection {
            include_output: false,
            include_norm: false,
            ..TrainableSelection::everything(&net)
        };
        final_diverged = guarded_finetune(&mut net, data, &spec, &sel, "final".into(), &mut train_logs)?;
    }
    let report = PopReport {
        method: kind,
        seed: config.seed,
        search,
        layers,
        template_exhausted,
        final_finetune_diverged: final_diverged,
        final_metrics: FinalMetrics::compute(&net, data)?,
        params: count_params(&net),
        flops: count_flops(&net),
        operator_histogram: OperatorHistogram::from_network(&net),
        train_logs,
        wall_time: started.elapsed(),
    };
    Ok((net, report))
}

/// Progressive operational perceptron with two-pass greedy operator search.
pub fn run_pop_baseline<T: Real>(data: &ProgressionData<'_, T>, config: &PopConfig) -> Result<(GopNetwork<T>, PopReport)> {
    run_layerwise(data, config, BaselineKind::Pop)
}

/// The same layerwise procedure with every neuron a sigmoid perceptron.
pub fn run_pmlp_baseline<T: Real>(data: &ProgressionData<'_, T>, config: &PopConfig) -> Result<(GopNetwork<T>, PopReport)> {
    run_layerwise(data, config, BaselineKind::Pmlp)
}
