//! Run configuration and the command implementations behind the `gop`
//! binary.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::{run_pmlp_baseline, run_pop_baseline, PopConfig, PopReport};
use crate::cost::{count_flops, count_params};
use crate::data::{load_csv, one_hot, split_dataset, CsvOptions, Dataset, SplitFractions};
use crate::error::{GopError, Result};
use crate::model_io::{self, write_atomic};
use crate::network::GopNetwork;
use crate::operators::OperatorSet;
use crate::progression::{
    derive_seed, run_progression, train_logs_csv, OperatorHistogram, ProgressionConfig, ProgressionReport, Variant,
};
use crate::train::{evaluate, LossKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    HeMLGOP,
    HoMLGOP,
    HeMLRN,
    HoMLRN,
    Pop,
    Pmlp,
}

impl Method {
    pub fn variant(self) -> Option<Variant> {
        match self {
            Method::HeMLGOP => Some(Variant::HeMLGOP),
            Method::HoMLGOP => Some(Variant::HoMLGOP),
            Method::HeMLRN => Some(Variant::HeMLRN),
            Method::HoMLRN => Some(Variant::HoMLRN),
            Method::Pop | Method::Pmlp => None,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_ascii_lowercase()))
            .map_err(|_| GopError::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    #[serde(flatten)]
    pub csv: CsvOptions,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            path: PathBuf::from("data.csv"),
            csv: CsvOptions::default(),
        }
    }
}

/// Everything needed to re-execute a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub split: SplitFractions,
    pub variant: Method,
    pub progression: ProgressionConfig,
    pub pop: PopConfig,
    pub out: PathBuf,
    /// Root of every random choice in the run.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            split: SplitFractions::default(),
            variant: Method::HeMLGOP,
            progression: ProgressionConfig::default(),
            pop: PopConfig::default(),
            out: PathBuf::from("out"),
            seed: 0,
        }
    }
}

const SPLIT_TAG: u64 = 0x5350_4c49_54;

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| GopError::Config(e.to_string()))?;
        Self::from_value(v)
    }

    fn from_value(v: Value) -> Result<Self> {
        serde_path_to_error::deserialize(v).map_err(|e| {
            let path = e.path().to_string();
            GopError::Config(format!("{path}: {}", e.into_inner()))
        })
    }

    /// Loads a config file; a relative dataset path is resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GopError::io(path.display().to_string(), e))?;
        let mut cfg = Self::from_json(&text)?;
        if cfg.dataset.path.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.dataset.path = dir.join(&cfg.dataset.path);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value` overrides with dotted keys. Values are parsed as
    /// JSON when possible and taken as strings otherwise.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| GopError::Config(format!("override `{item}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut v;
            for part in key.split('.') {
                let obj = slot
                    .as_object_mut()
                    .ok_or_else(|| GopError::Config(format!("`{key}` does not name a config field")))?;
                if !obj.contains_key(part) {
                    return Err(GopError::Config(format!("unknown config key `{key}`")));
                }
                slot = obj.get_mut(part).expect("checked");
            }
            *slot = value;
        }
        Self::from_value(v)
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        match self.variant.variant() {
            Some(_) => self.progression.validate(),
            None => self.pop.validate(),
        }
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, &[SPLIT_TAG])
    }

    /// Loads and splits the dataset exactly as a training run does.
    pub fn prepare_dataset(&self) -> Result<Dataset> {
        let ds = load_csv(&self.dataset.path, &self.dataset.csv)?;
        split_dataset(&ds, &self.split, self.split_seed())
    }
}

/// Errors sorted by the exit code they map to.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or unreadable inputs (exit 2).
    Config(GopError),
    /// Failure while training or evaluating (exit 3).
    Runtime(GopError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn inner(&self) -> &GopError {
        match self {
            CliError::Config(e) | CliError::Runtime(e) => e,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.inner())
    }
}

impl std::error::Error for CliError {}

fn config_err(e: GopError) -> CliError {
    CliError::Config(e)
}

fn runtime_err(e: GopError) -> CliError {
    CliError::Runtime(e)
}

/// The report written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RunReport {
    Progression(ProgressionReport),
    Baseline(PopReport),
}

impl RunReport {
    pub fn to_json(&self) -> String {
        match self {
            RunReport::Progression(r) => r.to_json(),
            RunReport::Baseline(r) => r.to_json(),
        }
    }

    pub fn test_accuracy(&self) -> Option<f64> {
        self.final_metrics().test.map(|m| m.accuracy)
    }

    pub fn final_metrics(&self) -> &crate::progression::FinalMetrics {
        match self {
            RunReport::Progression(r) => &r.final_metrics,
            RunReport::Baseline(r) => &r.final_metrics,
        }
    }

    pub fn params(&self) -> usize {
        match self {
            RunReport::Progression(r) => r.params,
            RunReport::Baseline(r) => r.params,
        }
    }

    pub fn flops(&self) -> u64 {
        match self {
            RunReport::Progression(r) => r.flops,
            RunReport::Baseline(r) => r.flops,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub network: GopNetwork<f64>,
    pub report: RunReport,
    pub out_dir: PathBuf,
}

/// Trains according to `config` and writes `model.json`, `report.json`,
/// `trainlog.csv`, `histogram.csv`, `config.json` and `timing.json` into
/// `config.out`. Every file is written atomically.
pub fn cmd_train(config: &RunConfig) -> std::result::Result<TrainOutcome, CliError> {
    config.validate().map_err(config_err)?;
    let ds = config.prepare_dataset().map_err(config_err)?;
    let arrays = ds.split_arrays().map_err(config_err)?;
    let data = arrays.progression_data();

    let (network, report, logs, wall) = match config.variant.variant() {
        Some(variant) => {
            let pc = ProgressionConfig {
                variant,
                seed: config.seed,
                ..config.progression.clone()
            };
            let (net, rep) = run_progression(&data, &pc).map_err(runtime_err)?;
            let logs = train_logs_csv(&rep.train_logs);
            let wall = timing_json(rep.wall_time, rep.steps.iter().map(|s| s.wall_time.as_secs_f64()).collect());
            (net, RunReport::Progression(rep), logs, wall)
        }
        None => {
            let pc = PopConfig {
                seed: config.seed,
                ..config.pop.clone()
            };
            let run = if config.variant == Method::Pop {
                run_pop_baseline(&data, &pc)
            } else {
                run_pmlp_baseline(&data, &pc)
            };
            let (net, rep) = run.map_err(runtime_err)?;
            let logs = train_logs_csv(&rep.train_logs);
            let wall = timing_json(rep.wall_time, Vec::new());
            (net, RunReport::Baseline(rep), logs, wall)
        }
    };

    let out = config.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| runtime_err(GopError::io(out.display().to_string(), e)))?;
    let hist = match &report {
        RunReport::Progression(r) => &r.operator_histogram,
        RunReport::Baseline(r) => &r.operator_histogram,
    };
    let files: [(&str, String); 6] = [
        ("model.json", model_io::to_json(&network)),
        ("report.json", report.to_json()),
        ("trainlog.csv", logs),
        ("histogram.csv", hist.to_csv()),
        ("config.json", config.to_json()),
        ("timing.json", wall),
    ];
    for (name, body) in files {
        write_atomic(&out.join(name), body.as_bytes()).map_err(runtime_err)?;
    }
    Ok(TrainOutcome {
        network,
        report,
        out_dir: out,
    })
}

fn timing_json(total: std::time::Duration, steps: Vec<f64>) -> String {
    serde_json::to_string_pretty(&serde_json::json!({
        "total_seconds": total.as_secs_f64(),
        "step_seconds": steps,
    }))
    .expect("timing serializes")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub test_accuracy: Vec<Option<f64>>,
    pub params: Vec<usize>,
    pub flops: Vec<u64>,
    pub median_test_accuracy: Option<f64>,
    pub median_params: f64,
    pub median_flops: f64,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

/// Runs `config` once per seed into `out/seed-<s>/` and writes
/// `out/summary.json` with per-seed and median metrics.
pub fn cmd_train_seeds(config: &RunConfig, seeds: &[u64]) -> std::result::Result<SeedSummary, CliError> {
    if seeds.is_empty() {
        return Err(config_err(GopError::Config("empty seed list".into())));
    }
    let mut summary = SeedSummary {
        seeds: seeds.to_vec(),
        test_accuracy: Vec::new(),
        params: Vec::new(),
        flops: Vec::new(),
        median_test_accuracy: None,
        median_params: 0.0,
        median_flops: 0.0,
    };
    for &s in seeds {
        let cfg = RunConfig {
            seed: s,
            out: config.out.join(format!("seed-{s}")),
            ..config.clone()
        };
        let outcome = cmd_train(&cfg)?;
        summary.test_accuracy.push(outcome.report.test_accuracy());
        summary.params.push(outcome.report.params());
        summary.flops.push(outcome.report.flops());
    }
    let accs: Vec<f64> = summary.test_accuracy.iter().flatten().copied().collect();
    summary.median_test_accuracy = median(&accs);
    summary.median_params = median(&summary.params.iter().map(|&p| p as f64).collect::<Vec<_>>()).unwrap_or(0.0);
    summary.median_flops = median(&summary.flops.iter().map(|&p| p as f64).collect::<Vec<_>>()).unwrap_or(0.0);
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_atomic(&config.out.join("summary.json"), text.as_bytes()).map_err(runtime_err)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub accuracy: f64,
    pub loss: f64,
    pub params: usize,
    pub flops: u64,
}

/// Where `cmd_eval` takes its rows from.
pub enum EvalSource<'a> {
    /// The test split rebuilt from a run configuration.
    Run(&'a RunConfig),
    /// Every row of a CSV file, used as is.
    Csv(&'a Path, &'a CsvOptions),
}

pub fn cmd_eval(model_path: &Path, source: EvalSource<'_>) -> std::result::Result<EvalOutput, CliError> {
    let net: GopNetwork<f64> = model_io::load(model_path).map_err(config_err)?;
    let (x, labels) = match source {
        EvalSource::Run(cfg) => {
            let ds = cfg.prepare_dataset().map_err(config_err)?;
            let split = ds.split.as_ref().expect("split dataset");
            let idx = if split.test.is_empty() { &split.train } else { &split.test };
            let x = ds.x.select(ndarray::Axis(0), idx);
            (x, idx.iter().map(|&i| ds.y[i]).collect::<Vec<_>>())
        }
        EvalSource::Csv(path, opts) => {
            let opts = CsvOptions {
                standardize_features: false,
                ..opts.clone()
            };
            let ds = load_csv(path, &opts).map_err(config_err)?;
            (ds.x, ds.y)
        }
    };
    if let Some(&bad) = labels.iter().find(|&&c| c >= net.num_outputs()) {
        return Err(runtime_err(GopError::dims("label classes", net.num_outputs(), bad + 1)));
    }
    let y = one_hot(&labels, net.num_outputs());
    let m = evaluate(&net, x.view(), y.view(), LossKind::Mse).map_err(runtime_err)?;
    Ok(EvalOutput {
        accuracy: m.accuracy,
        loss: m.loss,
        params: count_params(&net),
        flops: count_flops(&net),
    })
}

pub fn cmd_params(model_path: &Path) -> std::result::Result<usize, CliError> {
    let net: GopNetwork<f64> = model_io::load(model_path).map_err(config_err)?;
    Ok(count_params(&net))
}

pub fn cmd_flops(model_path: &Path) -> std::result::Result<u64, CliError> {
    let net: GopNetwork<f64> = model_io::load(model_path).map_err(config_err)?;
    Ok(count_flops(&net))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

/// Operator distribution and per-step improvement tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTables {
    pub histogram: OperatorHistogram,
    pub operators: String,
    pub steps: String,
}

fn table(format: TableFormat, header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str(&header.join(","));
            out.push('\n');
            for r in rows {
                out.push_str(&r.join(","));
                out.push('\n');
            }
        }
        TableFormat::Markdown => {
            out.push_str(&format!("| {} |\n", header.join(" | ")));
            out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
            for r in rows {
                out.push_str(&format!("| {} |\n", r.join(" | ")));
            }
        }
    }
    out
}

/// Builds tables from a progression report. The histogram counts blocks
/// that were accepted in layers that were kept.
pub fn report_tables(report: &ProgressionReport, format: TableFormat) -> ReportTables {
    let kept = |l: usize| report.layers.iter().find(|r| r.layer_index == l).is_none_or(|r| r.accepted);
    let mut histogram = OperatorHistogram::default();
    for s in report.steps.iter().filter(|s| s.accepted && kept(s.layer_index)) {
        histogram.add(s.chosen_op_set, s.block_width);
    }
    let mut op_rows = Vec::new();
    for (cat, blocks, neurons) in [
        ("nodal", &histogram.nodal, &histogram.nodal_neurons),
        ("pool", &histogram.pool, &histogram.pool_neurons),
        ("activation", &histogram.activation, &histogram.activation_neurons),
    ] {
        for (op, count) in blocks {
            op_rows.push(vec![cat.to_string(), op.clone(), count.to_string(), neurons[op].to_string()]);
        }
    }
    let step_rows: Vec<Vec<String>> = report
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            vec![
                i.to_string(),
                s.layer_index.to_string(),
                s.block_width.to_string(),
                s.chosen_op_set.to_string(),
                s.r_value.map(|r| r.to_string()).unwrap_or_else(|| "-".into()),
                s.accepted.to_string(),
                s.train_loss.to_string(),
            ]
        })
        .collect();
    ReportTables {
        operators: table(format, &["category", "operator", "blocks", "neurons"], &op_rows),
        steps: table(
            format,
            &["step", "layer", "width", "op_set", "r", "accepted", "train_loss"],
            &step_rows,
        ),
        histogram,
    }
}

pub fn cmd_report(report_path: &Path, format: TableFormat) -> std::result::Result<ReportTables, CliError> {
    let text = std::fs::read_to_string(report_path)
        .map_err(|e| config_err(GopError::io(report_path.display().to_string(), e)))?;
    let report: ProgressionReport = serde_json::from_str(&text).map_err(|e| {
        config_err(GopError::Format {
            path: report_path.display().to_string(),
            message: e.to_string(),
        })
    })?;
    Ok(report_tables(&report, format))
}

/// Distinct operator sets per hidden layer.
pub fn distinct_op_sets(net: &GopNetwork<f64>) -> Vec<usize> {
    net.layers()
        .iter()
        .map(|l| {
            let mut ops: Vec<OperatorSet> = l.blocks().iter().map(|b| b.op_set).collect();
            ops.sort_by_key(|o| o.index());
            ops.dedup();
            ops.len()
        })
        .collect()
}
