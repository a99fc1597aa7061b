//! Heterogeneous progressive growth of GOP networks and its variants.
//!
//! A layer starts with `n_min` neurons and grows by blocks of `n_i`. Each
//! block's operator set is picked by drawing random weights for every
//! candidate in the library and solving the read-out in closed form; the
//! winner is then (optionally) finetuned by backpropagation. A block is
//! kept only while the relative improvement stays above `eps_n`. New layers
//! are stacked on the frozen outputs of the previous ones and kept while
//! their relative improvement stays above `eps_l`.

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{count_flops, count_params};
use crate::error::{GopError, Result};
use crate::network::{GopLayer, GopNetwork, NeuronBlock, NormState};
use crate::operators::{enumerate_operator_sets, ActivationOp, NodalOp, OperatorSet, PoolOp, LIBRARY_SIZE};
use crate::ridge::{best_over_grid, CandidateFit, ReadoutSolver, ScoreMetric, DEFAULT_C_GRID};
use crate::scalar::Real;
use crate::train::{evaluate, finetune, DataRef, LossKind, Metrics, TrainLog, TrainSpec, TrainableSelection};

/// Thresholds serialize `+inf` as the string `"inf"`.
pub(crate) mod threshold {
    use serde::de::{self, Deserializer, Visitor};
    use serde::Serializer;
    use std::fmt;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = f64;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or \"inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
                Ok(v)
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
                Ok(v as f64)
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
                Ok(v as f64)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
                match v {
                    "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
                    _ => v.parse().map_err(|_| E::invalid_value(de::Unexpected::Str(v), &self)),
                }
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    HeMLGOP,
    HoMLGOP,
    HeMLRN,
    HoMLRN,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::HeMLGOP, Variant::HoMLGOP, Variant::HeMLRN, Variant::HoMLRN];

    /// All blocks of a layer share the first block's operator set.
    pub fn homogeneous(self) -> bool {
        matches!(self, Variant::HoMLGOP | Variant::HoMLRN)
    }

    /// New blocks are finetuned by backpropagation while growing.
    pub fn finetunes_steps(self) -> bool {
        matches!(self, Variant::HeMLGOP | Variant::HoMLGOP)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::HeMLGOP => "hemlgop",
            Variant::HoMLGOP => "homlgop",
            Variant::HeMLRN => "hemlrn",
            Variant::HoMLRN => "homlrn",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateMetric {
    Loss,
    Accuracy,
}

impl RateMetric {
    fn score_metric(self) -> ScoreMetric {
        match self {
            RateMetric::Loss => ScoreMetric::Mse,
            RateMetric::Accuracy => ScoreMetric::Accuracy,
        }
    }

    fn pick(self, m: &Metrics) -> f64 {
        match self {
            RateMetric::Loss => m.loss,
            RateMetric::Accuracy => m.accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProgressionConfig {
    pub n_min: usize,
    pub n_i: usize,
    pub max_layer_width: usize,
    pub max_layers: usize,
    #[serde(with = "threshold")]
    pub eps_n: f64,
    #[serde(with = "threshold")]
    pub eps_l: f64,
    pub rate_metric: RateMetric,
    pub variant: Variant,
    pub c_grid: Vec<f64>,
    pub train_spec: TrainSpec,
    /// Restricts the operator library; `None` searches all 144 sets.
    pub library: Option<Vec<OperatorSet>>,
    /// Finetune the whole network once growth stops.
    pub final_finetune: bool,
    pub seed: u64,
}

impl Default for ProgressionConfig {
    fn default() -> Self {
        ProgressionConfig {
            n_min: 40,
            n_i: 20,
            max_layer_width: 200,
            max_layers: 8,
            eps_n: 1e-4,
            eps_l: 1e-4,
            rate_metric: RateMetric::Loss,
            variant: Variant::HeMLGOP,
            c_grid: DEFAULT_C_GRID.to_vec(),
            train_spec: TrainSpec::default(),
            library: None,
            final_finetune: true,
            seed: 0,
        }
    }
}

impl ProgressionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GopError::Config(m.to_string()));
        if self.n_min == 0 || self.n_i == 0 {
            return bad("n_min and n_i must be positive");
        }
        if self.n_min > self.max_layer_width {
            return bad("n_min exceeds max_layer_width");
        }
        if self.max_layers == 0 {
            return bad("max_layers must be positive");
        }
        if !(self.eps_n >= 0.0) || !(self.eps_l >= 0.0) {
            return bad("improvement thresholds must be non-negative");
        }
        if self.c_grid.is_empty() || self.c_grid.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return bad("c_grid must hold finite non-negative values");
        }
        if let Some(lib) = &self.library {
            if lib.is_empty() {
                return bad("operator library is empty");
            }
        }
        self.train_spec.validate()
    }

    pub fn operator_library(&self) -> Vec<OperatorSet> {
        self.library.clone().unwrap_or_else(enumerate_operator_sets)
    }
}

/// Relative improvement from `before` to `after`; positive means better.
pub fn improvement_rate(before: f64, after: f64, metric: RateMetric) -> Result<f64> {
    if before == 0.0 {
        return Err(GopError::DegenerateBaseline);
    }
    Ok(match metric {
        RateMetric::Loss => (before - after) / before,
        RateMetric::Accuracy => (after - before) / before,
    })
}

/// Splits a run is trained, selected and reported on. Targets are one-hot
/// rows (or regression targets).
#[derive(Debug, Clone, Copy)]
pub struct ProgressionData<'a, T> {
    pub train: DataRef<'a, T>,
    pub val: Option<DataRef<'a, T>>,
    pub test: Option<DataRef<'a, T>>,
}

impl<'d, T: Real> ProgressionData<'d, T> {
    fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.x.nrows() == 0 {
            return Err(GopError::EmptyInput("empty training split"));
        }
        if t.y.nrows() != t.x.nrows() {
            return Err(GopError::dims("training targets", t.x.nrows(), t.y.nrows()));
        }
        for s in self.val.iter().chain(self.test.iter()) {
            if s.x.ncols() != t.x.ncols() {
                return Err(GopError::dims("split feature columns", t.x.ncols(), s.x.ncols()));
            }
            if s.y.ncols() != t.y.ncols() || s.y.nrows() != s.x.nrows() {
                return Err(GopError::dims("split target columns", t.y.ncols(), s.y.ncols()));
            }
        }
        Ok(())
    }

    /// Split the improvement rates are measured on.
    fn rate_split(&self) -> DataRef<'d, T> {
        self.val.unwrap_or(self.train)
    }
}

/// SplitMix64 over a root seed and a path of indices.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(root), |acc, &p| mix(acc ^ mix(p)))
}

const TAG_CANDIDATE: u64 = 1;
const TAG_STEP_FINETUNE: u64 = 2;
const TAG_FINAL_FINETUNE: u64 = 3;

/// Random block with weights and biases drawn from `Uniform(-1, 1)`.
pub fn random_block<T: Real>(op_set: OperatorSet, fan_in: usize, width: usize, seed: u64) -> NeuronBlock<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || T::of(rng.random_range(-1.0..1.0));
    let weights = Array2::from_shape_simple_fn((fan_in, width), &mut draw);
    let bias = Array1::from_shape_simple_fn(width, &mut draw);
    NeuronBlock { op_set, weights, bias }
}

/// Winner of an operator-set search.
#[derive(Debug, Clone)]
pub struct SearchResult<T> {
    pub op_set: OperatorSet,
    pub block: NeuronBlock<T>,
    /// Standardization fitted on the block's training outputs.
    pub norm: NormState<T>,
    pub fit: CandidateFit<T>,
    /// Indexed by library position; `None` when not evaluated or failed.
    pub candidate_scores: Vec<Option<f64>>,
}

/// Frozen inputs to the layer being grown and its current output.
struct LayerContext<T> {
    input_train: Array2<T>,
    input_val: Option<Array2<T>>,
    existing_train: Array2<T>,
    existing_val: Option<Array2<T>>,
}

impl<T: Real> LayerContext<T> {
    fn build(net: Option<&GopNetwork<T>>, layer_index: usize, data: &ProgressionData<'_, T>) -> Result<Self> {
        let features = |x: ArrayView2<'_, T>| -> Result<Array2<T>> {
            match net {
                Some(n) => n.features_before(x, layer_index),
                None => Ok(x.to_owned()),
            }
        };
        let input_train = features(data.train.x)?;
        let input_val = data.val.map(|v| features(v.x)).transpose()?;
        let existing = |input: &Array2<T>| -> Result<Array2<T>> {
            match net.and_then(|n| n.layers().get(layer_index)) {
                Some(layer) => layer.forward(input.view(), layer_index),
                None => Ok(Array2::zeros((input.nrows(), 0))),
            }
        };
        let existing_train = existing(&input_train)?;
        let existing_val = input_val.as_ref().map(existing).transpose()?;
        Ok(LayerContext {
            input_train,
            input_val,
            existing_train,
            existing_val,
        })
    }
}

fn search_in_context<T: Real>(
    ctx: &LayerContext<T>,
    data: &ProgressionData<'_, T>,
    layer_index: usize,
    step: usize,
    width: usize,
    library: &[OperatorSet],
    config: &ProgressionConfig,
) -> Result<SearchResult<T>> {
    if width == 0 {
        return Err(GopError::Config("block width must be positive".into()));
    }
    let solver = ReadoutSolver::new(ctx.existing_train.view(), data.train.y)?;
    let c_grid: Vec<T> = config.c_grid.iter().map(|&c| T::of(c)).collect();
    let metric = config.rate_metric.score_metric();
    let fan_in = ctx.input_train.ncols();
    let evaluate_one = |op: &OperatorSet| -> Option<(NeuronBlock<T>, NormState<T>, CandidateFit<T>)> {
        let seed = derive_seed(
            config.seed,
            &[TAG_CANDIDATE, layer_index as u64, step as u64, op.index() as u64],
        );
        let block = random_block::<T>(*op, fan_in, width, seed);
        let mut h = block.forward(ctx.input_train.view()).ok()?;
        if !h.iter().all(|v| v.is_finite()) {
            return None;
        }
        let norm = NormState::fit(h.view());
        norm.apply_inplace(&mut h);
        let val_new = match (&ctx.input_val, data.val) {
            (Some(iv), Some(_)) => {
                let mut hv = block.forward(iv.view()).ok()?;
                norm.apply_inplace(&mut hv);
                if !hv.iter().all(|v| v.is_finite()) {
                    return None;
                }
                Some(hv)
            }
            _ => None,
        };
        let eval = match (&val_new, &ctx.existing_val, data.val) {
            (Some(hv), Some(ev), Some(v)) => Some((ev.view(), hv.view(), v.y)),
            _ => None,
        };
        let fit = best_over_grid(
            &solver,
            h.view(),
            ctx.existing_train.view(),
            data.train.y,
            eval,
            &c_grid,
            metric,
        )
        .ok()?;
        Some((block, norm, fit))
    };
    let results: Vec<_> = library.par_iter().map(evaluate_one).collect();

    let mut candidate_scores = vec![None; LIBRARY_SIZE];
    let mut best: Option<(OperatorSet, NeuronBlock<T>, NormState<T>, CandidateFit<T>)> = None;
    let mut order: Vec<usize> = (0..library.len()).collect();
    order.sort_by_key(|&i| library[i].index());
    let mut results: Vec<_> = results.into_iter().map(Some).collect();
    for i in order {
        let op = library[i];
        let Some((block, norm, fit)) = results[i].take().flatten() else {
            continue;
        };
        let score = fit.score.to_f64_lossy();
        candidate_scores[op.index()] = Some(score);
        let better = match &best {
            None => true,
            Some((_, _, _, b)) => fit.score > b.score,
        };
        if better {
            best = Some((op, block, norm, fit));
        }
    }
    let (op_set, block, norm, fit) = best.ok_or(GopError::AllCandidatesFailed)?;
    Ok(SearchResult {
        op_set,
        block,
        norm,
        fit,
        candidate_scores,
    })
}

/// Scores every operator set in the configured library for a new block of
/// `width` neurons in layer `layer_index` and returns the best.
///
/// `net` may be `None` when the first layer is being created. When
/// `layer_index` equals the number of hidden layers a fresh layer is
/// assumed, fed by the frozen output of the last one.
pub fn search_operator_set<T: Real>(
    net: Option<&GopNetwork<T>>,
    layer_index: usize,
    width: usize,
    data: &ProgressionData<'_, T>,
    config: &ProgressionConfig,
) -> Result<SearchResult<T>> {
    data.validate()?;
    let depth = net.map_or(0, |n| n.layers().len());
    if layer_index > depth {
        return Err(GopError::Config(format!("layer {layer_index} cannot be grown on a network of depth {depth}")));
    }
    let ctx = LayerContext::build(net, layer_index, data)?;
    search_in_context(&ctx, data, layer_index, 0, width, &config.operator_library(), config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub layer_index: usize,
    pub block_width: usize,
    pub candidate_scores: Vec<Option<f64>>,
    pub chosen_op_set: OperatorSet,
    /// Improvement over the previous committed state; `None` for the first
    /// block of a layer.
    pub r_value: Option<f64>,
    pub accepted: bool,
    /// Backpropagation diverged and the block kept its random weights.
    pub finetune_diverged: bool,
    /// Training loss (MSE) after the step.
    pub train_loss: f64,
    #[serde(skip)]
    pub wall_time: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer_index: usize,
    pub width: usize,
    pub blocks: usize,
    pub r_value: Option<f64>,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub train: Metrics,
    pub val: Option<Metrics>,
    pub test: Option<Metrics>,
}

impl FinalMetrics {
    pub fn compute<T: Real>(net: &GopNetwork<T>, data: &ProgressionData<'_, T>) -> Result<Self> {
        let m = |d: DataRef<'_, T>| evaluate(net, d.x, d.y, LossKind::Mse);
        Ok(FinalMetrics {
            train: m(data.train)?,
            val: data.val.map(m).transpose()?,
            test: data.test.map(m).transpose()?,
        })
    }
}

/// Accepted blocks (and neurons) per operator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OperatorHistogram {
    pub nodal: BTreeMap<String, usize>,
    pub pool: BTreeMap<String, usize>,
    pub activation: BTreeMap<String, usize>,
    pub nodal_neurons: BTreeMap<String, usize>,
    pub pool_neurons: BTreeMap<String, usize>,
    pub activation_neurons: BTreeMap<String, usize>,
}

impl OperatorHistogram {
    pub fn from_network<T: Real>(net: &GopNetwork<T>) -> Self {
        let mut h = OperatorHistogram::default();
        for block in net.layers().iter().flat_map(|l| l.blocks()) {
            h.add(block.op_set, block.width());
        }
        h
    }

    pub fn add(&mut self, op: OperatorSet, neurons: usize) {
        let bump = |m: &mut BTreeMap<String, usize>, k: &str, by: usize| *m.entry(k.to_string()).or_insert(0) += by;
        bump(&mut self.nodal, op.nodal.token(), 1);
        bump(&mut self.pool, op.pool.token(), 1);
        bump(&mut self.activation, op.activation.token(), 1);
        bump(&mut self.nodal_neurons, op.nodal.token(), neurons);
        bump(&mut self.pool_neurons, op.pool.token(), neurons);
        bump(&mut self.activation_neurons, op.activation.token(), neurons);
    }

    pub fn total_blocks(&self) -> usize {
        self.nodal.values().sum()
    }

    /// `category,operator,blocks,neurons`, one row per operator of the
    /// library (zero rows included).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,operator,blocks,neurons\n");
        let rows = |out: &mut String, cat: &str, tokens: &[&str], b: &BTreeMap<String, usize>, n: &BTreeMap<String, usize>| {
            for t in tokens {
                let g = |m: &BTreeMap<String, usize>| m.get(*t).copied().unwrap_or(0);
                out.push_str(&format!("{cat},{t},{},{}\n", g(b), g(n)));
            }
        };
        let nodal: Vec<_> = NodalOp::ALL.iter().map(|o| o.token()).collect();
        let pool: Vec<_> = PoolOp::ALL.iter().map(|o| o.token()).collect();
        let act: Vec<_> = ActivationOp::ALL.iter().map(|o| o.token()).collect();
        rows(&mut out, "nodal", &nodal, &self.nodal, &self.nodal_neurons);
        rows(&mut out, "pool", &pool, &self.pool, &self.pool_neurons);
        rows(&mut out, "activation", &act, &self.activation, &self.activation_neurons);
        out
    }
}

/// A finetune run tagged with where it happened.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseLog {
    pub phase: String,
    pub log: TrainLog,
}

/// Writes phase logs as one CSV table.
pub fn train_logs_csv(logs: &[PhaseLog]) -> String {
    let mut out = format!("{}\n", TrainLog::CSV_HEADER);
    for p in logs {
        out.push_str(&p.log.csv_rows(&p.phase));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressionReport {
    pub variant: Variant,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub layers: Vec<LayerRecord>,
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

impl ProgressionReport {
    pub fn accepted_blocks(&self) -> usize {
        self.steps.iter().filter(|s| s.accepted).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Runs `finetune`, logging it under `phase`. A non-finite loss restores
/// the network and is reported as `Ok(true)`.
pub(crate) fn guarded_finetune<T: Real>(
    net: &mut GopNetwork<T>,
    data: &ProgressionData<'_, T>,
    spec: &TrainSpec,
    sel: &TrainableSelection,
    phase: String,
    logs: &mut Vec<PhaseLog>,
) -> Result<bool> {
    let snapshot = net.clone();
    match finetune(net, data.train, data.val, spec, sel) {
        Ok(log) => {
            logs.push(PhaseLog { phase, log });
            Ok(false)
        }
        Err(GopError::NonFiniteLoss { .. }) => {
            *net = snapshot;
            Ok(true)
        }
        Err(e) => Err(e),
    }
}

struct Grower<'a, 'd, T> {
    data: &'a ProgressionData<'d, T>,
    config: &'a ProgressionConfig,
    library: Vec<OperatorSet>,
    steps: Vec<StepRecord>,
    logs: Vec<PhaseLog>,
}

impl<T: Real> Grower<'_, '_, T> {
    fn rate_value(&self, net: &GopNetwork<T>) -> Result<f64> {
        let d = self.data.rate_split();
        Ok(self.config.rate_metric.pick(&evaluate(net, d.x, d.y, LossKind::Mse)?))
    }

    fn train_loss(&self, net: &GopNetwork<T>) -> Result<f64> {
        Ok(evaluate(net, self.data.train.x, self.data.train.y, LossKind::Mse)?.loss)
    }

    /// Finetunes the newest block. Returns `true` when the loss diverged,
    /// in which case the network is restored to its state before the call.
    fn step_finetune(&mut self, net: &mut GopNetwork<T>, layer: usize, block: usize, step: usize) -> Result<bool> {
        if !self.config.variant.finetunes_steps() {
            return Ok(false);
        }
        let spec = TrainSpec {
            seed: derive_seed(self.config.seed, &[TAG_STEP_FINETUNE, layer as u64, step as u64]),
            ..self.config.train_spec.clone()
        };
        let sel = TrainableSelection::new_block(layer, block);
        let phase = format!("layer{layer}-step{step}");
        guarded_finetune(net, self.data, &spec, &sel, phase, &mut self.logs)
    }

    /// Adds layer `layer_index` (creating the network when `net` is `None`)
    /// and grows it until the width rule stops it.
    fn grow_layer(&mut self, net: Option<GopNetwork<T>>, layer_index: usize) -> Result<GopNetwork<T>> {
        let started = Instant::now();
        let ctx = LayerContext::build(net.as_ref(), layer_index, self.data)?;
        let first = search_in_context(&ctx, self.data, layer_index, 0, self.config.n_min, &self.library, self.config)?;
        let layer = GopLayer::new(vec![first.block], first.norm)?;
        let mut net = match net {
            None => GopNetwork::new(ctx.input_train.ncols(), vec![layer], first.fit.weights, first.fit.bias)?,
            Some(mut n) => {
                n.push_layer(layer, first.fit.weights, first.fit.bias)?;
                n
            }
        };
        let diverged = self.step_finetune(&mut net, layer_index, 0, 0)?;
        self.steps.push(StepRecord {
            layer_index,
            block_width: self.config.n_min,
            candidate_scores: first.candidate_scores,
            chosen_op_set: first.op_set,
            r_value: None,
            accepted: true,
            finetune_diverged: diverged,
            train_loss: self.train_loss(&net)?,
            wall_time: started.elapsed(),
        });
        let layer_library = if self.config.variant.homogeneous() {
            vec![first.op_set]
        } else {
            self.library.clone()
        };

        let mut current = self.rate_value(&net)?;
        let mut step = 1;
        while net.layers()[layer_index].width() + self.config.n_i <= self.config.max_layer_width {
            let started = Instant::now();
            let ctx = LayerContext::build(Some(&net), layer_index, self.data)?;
            let found = search_in_context(&ctx, self.data, layer_index, step, self.config.n_i, &layer_library, self.config)?;
            let snapshot = net.clone();
            let block_index = net.layers()[layer_index].blocks().len();
            net.layers_mut()[layer_index].push_block(found.block, &found.norm)?;
            net.set_output(found.fit.weights, found.fit.bias)?;
            let diverged = self.step_finetune(&mut net, layer_index, block_index, step)?;
            let after = self.rate_value(&net)?;
            let r = improvement_rate(current, after, self.config.rate_metric).ok();
            let accepted = matches!(r, Some(r) if r >= self.config.eps_n);
            let train_loss = self.train_loss(&net)?;
            self.steps.push(StepRecord {
                layer_index,
                block_width: self.config.n_i,
                candidate_scores: found.candidate_scores,
                chosen_op_set: found.op_set,
                r_value: r,
                accepted,
                finetune_diverged: diverged,
                train_loss,
                wall_time: started.elapsed(),
            });
            if !accepted {
                net = snapshot;
                break;
            }
            current = after;
            step += 1;
        }
        Ok(net)
    }
}

/// Grows a network from scratch and finetunes it.
pub fn run_progression<T: Real>(
    data: &ProgressionData<'_, T>,
    config: &ProgressionConfig,
) -> Result<(GopNetwork<T>, ProgressionReport)> {
    config.validate()?;
    data.validate()?;
    let started = Instant::now();
    let mut grower = Grower {
        data,
        config,
        library: config.operator_library(),
        steps: Vec::new(),
        logs: Vec::new(),
    };
    let mut net = grower.grow_layer(None, 0)?;
    let mut layers = vec![LayerRecord {
        layer_index: 0,
        width: net.layers()[0].width(),
        blocks: net.layers()[0].blocks().len(),
        r_value: None,
        accepted: true,
    }];
    let mut current = grower.rate_value(&net)?;
    while net.layers().len() < config.max_layers {
        let l = net.layers().len();
        let snapshot = net.clone();
        let grown = grower.grow_layer(Some(net), l)?;
        let after = grower.rate_value(&grown)?;
        let r = improvement_rate(current, after, config.rate_metric).ok();
        let accepted = matches!(r, Some(r) if r >= config.eps_l);
        layers.push(LayerRecord {
            layer_index: l,
            width: grown.layers()[l].width(),
            blocks: grown.layers()[l].blocks().len(),
            r_value: r,
            accepted,
        });
        if !accepted {
            net = snapshot;
            break;
        }
        net = grown;
        current = after;
    }

    let mut final_diverged = false;
    if config.final_finetune {
        let spec = TrainSpec {
            seed: derive_seed(config.seed, &[TAG_FINAL_FINETUNE]),
            ..config.train_spec.clone()
        };
        let everything = TrainableSelection::everything(&net);
        final_diverged = guarded_finetune(&mut net, data, &spec, &everything, "final".into(), &mut grower.logs)?;
    }

    let report = ProgressionReport {
        variant: config.variant,
        seed: config.seed,
        steps: grower.steps,
        layers,
        final_finetune_diverged: final_diverged,
        final_metrics: FinalMetrics::compute(&net, data)?,
        params: count_params(&net),
        flops: count_flops(&net),
        operator_histogram: OperatorHistogram::from_network(&net),
        train_logs: grower.logs,
        wall_time: started.elapsed(),
    };
    Ok((net, report))
}
