//! Tabular datasets: CSV ingestion, stratified splitting, train-only
//! feature standardization and synthetic generators.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GopError, Result};
use crate::network::column_moments;
use crate::operators::OperatorSet;
use crate::progression::random_block;
use crate::train::DataRef;

/// Which CSV column holds the label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumn {
    /// Zero-based position.
    Index(usize),
    /// Header name, or `"last"`.
    Name(String),
}

impl Default for LabelColumn {
    fn default() -> Self {
        LabelColumn::Name("last".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvOptions {
    pub label_column: LabelColumn,
    pub header: bool,
    /// Z-score features with statistics fitted on the training split when
    /// the dataset is split.
    pub standardize_features: bool,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            label_column: LabelColumn::default(),
            header: true,
            standardize_features: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaling {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    /// Class index per row, in `0..classes.len()`.
    pub y: Vec<usize>,
    /// Original label text per class index.
    pub classes: Vec<String>,
    pub feature_names: Option<Vec<String>>,
    pub split: Option<SplitIndices>,
    /// Standardize features on the training split when splitting.
    pub standardize: bool,
    /// Statistics applied by the last split, if any.
    pub scaling: Option<FeatureScaling>,
}

impl Dataset {
    /// Builds a dataset from features and class indices; class names are
    /// the indices themselves.
    pub fn from_labels(x: Array2<f64>, y: Vec<usize>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(GopError::dims("label count", x.nrows(), y.len()));
        }
        let c = y.iter().max().map_or(0, |m| m + 1);
        Ok(Dataset {
            x,
            y,
            classes: (0..c).map(|i| i.to_string()).collect(),
            feature_names: None,
            split: None,
            standardize: false,
            scaling: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_features(&self) -> usize {
        self.x.ncols()
    }

    /// Rows `idx` of the features and their one-hot targets.
    pub fn subset(&self, idx: &[usize]) -> (Array2<f64>, Array2<f64>) {
        let x = self.x.select(Axis(0), idx);
        let labels: Vec<usize> = idx.iter().map(|&i| self.y[i]).collect();
        (x, one_hot(&labels, self.num_classes()))
    }

    /// Features and one-hot targets of each split.
    pub fn split_arrays(&self) -> Result<SplitArrays> {
        let split = self
            .split
            .as_ref()
            .ok_or_else(|| GopError::Config("dataset has not been split".into()))?;
        let part = |idx: &[usize]| (!idx.is_empty()).then(|| self.subset(idx));
        Ok(SplitArrays {
            train: self.subset(&split.train),
            val: part(&split.val),
            test: part(&split.test),
        })
    }
}

/// Owned split matrices `(x, one_hot_y)`.
#[derive(Debug, Clone)]
pub struct SplitArrays {
    pub train: (Array2<f64>, Array2<f64>),
    pub val: Option<(Array2<f64>, Array2<f64>)>,
    pub test: Option<(Array2<f64>, Array2<f64>)>,
}

impl SplitArrays {
    pub fn progression_data(&self) -> crate::progression::ProgressionData<'_, f64> {
        fn r(p: &(Array2<f64>, Array2<f64>)) -> DataRef<'_, f64> {
            DataRef { x: p.0.view(), y: p.1.view() }
        }
        crate::progression::ProgressionData {
            train: r(&self.train),
            val: self.val.as_ref().map(r),
            test: self.test.as_ref().map(r),
        }
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut y = Array2::zeros((labels.len(), classes));
    for (r, &c) in labels.iter().enumerate() {
        y[[r, c]] = 1.0;
    }
    y
}

/// Reads a numeric CSV with one label column. Labels are mapped to
/// `0..C` in order of first appearance. Rows and columns in errors are
/// 1-based positions in the file.
pub fn load_csv(path: &Path, options: &CsvOptions) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| GopError::io(path.display().to_string(), e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut records = reader.records();
    let csv_err = |e: csv::Error| {
        let row = e.position().map_or(0, |p| p.line() as usize);
        GopError::Parse {
            row,
            column: 0,
            message: e.to_string(),
        }
    };

    let mut first: Option<csv::StringRecord> = None;
    let header = if options.header {
        let rec = records.next().transpose().map_err(csv_err)?;
        let rec = rec.ok_or(GopError::EmptyInput("csv file has no header"))?;
        Some(rec.iter().map(str::to_string).collect::<Vec<_>>())
    } else {
        first = records.next().transpose().map_err(csv_err)?;
        None
    };
    let width = match (&header, &first) {
        (Some(h), _) => h.len(),
        (None, Some(r)) => r.len(),
        (None, None) => return Err(GopError::EmptyInput("csv file has no rows")),
    };
    let label_col = match &options.label_column {
        LabelColumn::Index(i) if *i < width => *i,
        LabelColumn::Index(i) => return Err(GopError::UnknownLabelColumn(i.to_string())),
        LabelColumn::Name(n) if n == "last" => width - 1,
        LabelColumn::Name(n) => header
            .as_ref()
            .and_then(|h| h.iter().position(|c| c == n))
            .ok_or_else(|| GopError::UnknownLabelColumn(n.clone()))?,
    };
    if width < 2 {
        return Err(GopError::EmptyInput("csv needs at least one feature column"));
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut classes: Vec<String> = Vec::new();
    let mut class_of: HashMap<String, usize> = HashMap::new();
    let mut handle = |rec: csv::StringRecord| -> Result<()> {
        let row = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec.get(0) == Some("") {
            return Ok(());
        }
        if rec.len() != width {
            return Err(GopError::RaggedRows {
                row,
                expected: width,
                found: rec.len(),
            });
        }
        for (j, cell) in rec.iter().enumerate() {
            if j == label_col {
                let next = classes.len();
                let c = *class_of.entry(cell.to_string()).or_insert_with(|| {
                    classes.push(cell.to_string());
                    next
                });
                labels.push(c);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| GopError::Parse {
                row,
                column: j + 1,
                message: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(GopError::Parse {
                    row,
                    column: j + 1,
                    message: format!("`{cell}` is not finite"),
                });
            }
            data.push(v);
        }
        Ok(())
    };
    if let Some(r) = first {
        handle(r)?;
    }
    for rec in records {
        handle(rec.map_err(csv_err)?)?;
    }
    if labels.is_empty() {
        return Err(GopError::EmptyInput("csv file has no data rows"));
    }
    let x = Array2::from_shape_vec((labels.len(), width - 1), data).expect("rectangular rows");
    let feature_names = header.map(|h| {
        h.into_iter()
            .enumerate()
            .filter(|(j, _)| *j != label_col)
            .map(|(_, n)| n)
            .collect()
    });
    Ok(Dataset {
        x,
        y: labels,
        classes,
        feature_names,
        split: None,
        standardize: options.standardize_features,
        scaling: None,
    })
}

/// Writes features and labels as CSV with a `label` column last.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    let names: Vec<String> = match &ds.feature_names {
        Some(n) => n.clone(),
        None => (0..ds.num_features()).map(|j| format!("x{j}")).collect(),
    };
    out.push_str(&names.join(","));
    out.push_str(",label\n");
    for (row, &label) in ds.x.outer_iter().zip(&ds.y) {
        for v in row {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&ds.classes[label]);
        out.push('\n');
    }
    crate::model_io::write_atomic(path, out.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub stratified: bool,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.6,
            val: 0.2,
            test: 0.2,
            stratified: true,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(*f >= 0.0)) {
            return Err(GopError::Config("split fractions must be non-negative".into()));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(GopError::Config(format!("split fractions sum to {sum}, expected 1")));
        }
        if self.train == 0.0 {
            return Err(GopError::Config("training fraction must be positive".into()));
        }
        Ok(())
    }
}

fn allocate(n: usize, f: &SplitFractions) -> (usize, usize) {
    let n_train = (n as f64 * f.train).round() as usize;
    let n_val = ((n as f64 * f.val).round() as usize).min(n - n_train.min(n));
    (n_train.min(n), n_val)
}

/// Partitions the rows into train/val/test, stratified by class unless
/// disabled, and fits feature standardization on the training rows when
/// the dataset asks for it.
pub fn split_dataset(ds: &Dataset, fractions: &SplitFractions, seed: u64) -> Result<Dataset> {
    fractions.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = SplitIndices::default();
    let mut assign = |mut idx: Vec<usize>, split: &mut SplitIndices| {
        idx.shuffle(&mut rng);
        let (a, b) = allocate(idx.len(), fractions);
        split.train.extend_from_slice(&idx[..a]);
        split.val.extend_from_slice(&idx[a..a + b]);
        split.test.extend_from_slice(&idx[a + b..]);
    };
    let needed = [fractions.train, fractions.val, fractions.test]
        .iter()
        .filter(|f| **f > 0.0)
        .count();
    let mut per_class = vec![Vec::new(); ds.num_classes()];
    for (i, &c) in ds.y.iter().enumerate() {
        per_class[c].push(i);
    }
    for (c, idx) in per_class.iter().enumerate() {
        if fractions.stratified && idx.len() < needed {
            return Err(GopError::ClassTooSmall {
                class: ds.classes[c].clone(),
                count: idx.len(),
                splits: needed,
            });
        }
    }
    if fractions.stratified {
        for idx in per_class.iter().cloned() {
            assign(idx, &mut split);
        }
    } else {
        assign((0..ds.len()).collect(), &mut split);
    }
    for idx in [&mut split.train, &mut split.val, &mut split.test] {
        idx.sort_unstable();
    }
    for (c, idx) in per_class.iter().enumerate() {
        if !idx.iter().any(|i| split.train.binary_search(i).is_ok()) {
            return Err(GopError::ClassTooSmall {
                class: ds.classes[c].clone(),
                count: idx.len(),
                splits: needed,
            });
        }
    }

    let mut out = ds.clone();
    if let Some(prev) = &ds.scaling {
        // Undo an earlier split's scaling before refitting.
        out.x = &out.x * &prev.std + &prev.mean;
    }
    out.scaling = None;
    if ds.standardize {
        let train = out.x.select(Axis(0), &split.train);
        let (mean, std) = column_moments(train.view());
        out.x = (&out.x - &mean) / &std;
        out.scaling = Some(FeatureScaling { mean, std });
    }
    out.split = Some(split);
    Ok(out)
}

/// Two interleaving half circles with Gaussian noise, class 0 on the outer
/// arc.
pub fn two_moons(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_out = n / 2;
    let n_in = n - n_out;
    let lin = |k: usize, i: usize| if k > 1 { PI * i as f64 / (k - 1) as f64 } else { 0.0 };
    let mut x = Array2::zeros((n, 2));
    let mut y = Vec::with_capacity(n);
    for i in 0..n_out {
        let t = lin(n_out, i);
        x[[i, 0]] = t.cos();
        x[[i, 1]] = t.sin();
        y.push(0);
    }
    for i in 0..n_in {
        let t = lin(n_in, i);
        x[[n_out + i, 0]] = 1.0 - t.cos();
        x[[n_out + i, 1]] = 1.0 - t.sin() - 0.5;
        y.push(1);
    }
    if noise > 0.0 {
        let d = Normal::new(0.0, noise).expect("valid noise");
        x.mapv_inplace(|v| v + d.sample(&mut rng));
    }
    Dataset::from_labels(x, y).expect("matching rows")
}

/// Four Gaussian clusters at `(±1, ±1)`; diagonal clusters share a class.
pub fn xor_blobs(n: usize, sd: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = [(1.0, 1.0, 0), (-1.0, -1.0, 0), (1.0, -1.0, 1), (-1.0, 1.0, 1)];
    let mut x = Array2::zeros((n, 2));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let (cx, cy, label) = centers[i % 4];
        let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        x[[i, 0]] = cx + sd * a;
        x[[i, 1]] = cy + sd * b;
        y.push(label);
    }
    Dataset::from_labels(x, y).expect("matching rows")
}

/// `classes` isotropic Gaussian clusters in `dim` dimensions, centered at
/// `separation` times a scaled unit vector of a distinct axis.
pub fn gaussian_blobs(n: usize, dim: usize, classes: usize, separation: f64, sd: f64, seed: u64) -> Dataset {
    assert!(classes >= 1 && dim >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::zeros((n, dim));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for j in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            let center = if j == c % dim {
                separation * (1.0 + (c / dim) as f64)
            } else {
                0.0
            };
            x[[i, j]] = center + sd * z;
        }
        y.push(c);
    }
    Dataset::from_labels(x, y).expect("matching rows")
}

/// Labels drawn independently of standard normal features.
pub fn pure_noise(n: usize, dim: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_simple_fn((n, dim), || rng.sample::<f64, _>(StandardNormal));
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let mut ds = Dataset::from_labels(x, y).expect("matching rows");
    ds.classes = (0..classes).map(|c| c.to_string()).collect();
    ds
}

/// Regression data produced by a single random GOP block with the given
/// operator set followed by a random linear map.
pub fn teacher_student(
    n: usize,
    dim: usize,
    width: usize,
    outputs: usize,
    op_set: OperatorSet,
    noise: f64,
    seed: u64,
) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_simple_fn((n, dim), || rng.sample::<f64, _>(StandardNormal));
    let teacher = random_block::<f64>(op_set, dim, width, rng.random());
    let h = teacher.forward(x.view()).expect("teacher shape");
    let v = Array2::from_shape_simple_fn((width, outputs), || rng.random_range(-1.0..1.0));
    let mut y = h.dot(&v);
    if noise > 0.0 {
        y.mapv_inplace(|t| t + noise * rng.sample::<f64, _>(StandardNormal));
    }
    (x, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_rows() {
        let y = one_hot(&[1, 0, 2], 3);
        assert_eq!(y.row(0).to_vec(), vec![0.0, 1.0, 0.0]);
        assert_eq!(y.sum(), 3.0);
    }

    #[test]
    fn fraction_validation() {
        let bad = SplitFractions {
            train: 0.7,
            val: 0.2,
            test: 0.2,
            stratified: true,
        };
        assert!(matches!(bad.validate(), Err(GopError::Config(_))));
        assert!(SplitFractions::default().validate().is_ok());
    }

    #[test]
    fn moons_shape_and_balance() {
        let ds = two_moons(101, 0.0, 3);
        assert_eq!(ds.x.dim(), (101, 2));
        assert_eq!(ds.y.iter().filter(|&&c| c == 1).count(), 51);
        assert!((ds.x[[0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn xor_labels_follow_quadrants() {
        let ds = xor_blobs(400, 0.1, 1);
        for (row, &c) in ds.x.outer_iter().zip(&ds.y) {
            let same_sign = (row[0] > 0.0) == (row[1] > 0.0);
            assert_eq!(c, if same_sign { 0 } else { 1 });
        }
    }
}
