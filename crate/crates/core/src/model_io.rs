//! Versioned JSON model documents.
//!
//! ```json
//! { "version": 1, "input_dim": 2, "C": 2,
//!   "layers": [ { "blocks": [ { "op_set": {"nodal": "..", "pool": "..", "activation": ".."},
//!                               "weights": {"rows": 2, "cols": 40, "data": [..]},
//!                               "bias": [..] } ],
//!                 "norm": {"mode": "batch-norm", "mean": [..], "std": [..],
//!                          "scale": [..], "shift": [..]} } ],
//!   "output": { "weights": {"rows": 40, "cols": 2, "data": [..]}, "bias": [..] } }
//! ```
//!
//! Matrices are row-major; block weight rows index the block inputs.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{GopError, Result};
use crate::network::{GopLayer, GopNetwork, NeuronBlock, NormMode, NormState};
use crate::operators::OperatorSet;
use crate::scalar::Real;

pub const MODEL_VERSION: u64 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixDoc<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockDoc<T> {
    op_set: OperatorSet,
    weights: MatrixDoc<T>,
    bias: Vec<T>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NormDoc<T> {
    mode: NormMode,
    mean: Vec<T>,
    std: Vec<T>,
    scale: Vec<T>,
    shift: Vec<T>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc<T> {
    blocks: Vec<BlockDoc<T>>,
    norm: NormDoc<T>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputDoc<T> {
    weights: MatrixDoc<T>,
    bias: Vec<T>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc<T> {
    version: u64,
    input_dim: usize,
    #[serde(rename = "C")]
    classes: usize,
    layers: Vec<LayerDoc<T>>,
    output: OutputDoc<T>,
}

fn matrix_doc<T: Real>(m: &Array2<T>) -> MatrixDoc<T> {
    MatrixDoc {
        rows: m.nrows(),
        cols: m.ncols(),
        data: m.iter().copied().collect(),
    }
}

fn matrix_from_doc<T: Real>(doc: MatrixDoc<T>, path: &str) -> Result<Array2<T>> {
    let expected = doc.rows * doc.cols;
    if doc.data.len() != expected {
        return Err(GopError::format(
            format!("{path}.data"),
            format!("expected {expected} entries for a {}x{} matrix, found {}", doc.rows, doc.cols, doc.data.len()),
        ));
    }
    Array2::from_shape_vec((doc.rows, doc.cols), doc.data)
        .map_err(|e| GopError::format(path, e.to_string()))
}

fn vec_doc<T: Real>(v: &Array1<T>) -> Vec<T> {
    v.to_vec()
}

/// Serializes a network to its JSON model document.
pub fn to_json<T: Real>(net: &GopNetwork<T>) -> String {
    let doc = ModelDoc {
        version: MODEL_VERSION,
        input_dim: net.input_dim(),
        classes: net.num_outputs(),
        layers: net
            .layers()
            .iter()
            .map(|layer| LayerDoc {
                blocks: layer
                    .blocks()
                    .iter()
                    .map(|b| BlockDoc {
                        op_set: b.op_set,
                        weights: matrix_doc(&b.weights),
                        bias: vec_doc(&b.bias),
                    })
                    .collect(),
                norm: NormDoc {
                    mode: layer.norm().mode,
                    mean: vec_doc(&layer.norm().mean),
                    std: vec_doc(&layer.norm().std),
                    scale: vec_doc(&layer.norm().scale),
                    shift: vec_doc(&layer.norm().shift),
                },
            })
            .collect(),
        output: OutputDoc {
            weights: matrix_doc(net.output_weights()),
            bias: vec_doc(net.output_bias()),
        },
    };
    serde_json::to_string_pretty(&doc).expect("model document serializes")
}

/// Parses a model document, reporting the offending field path on failure.
pub fn from_json<T: Real>(text: &str) -> Result<GopNetwork<T>> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| GopError::format("$", e.to_string()))?;
    match value.get("version") {
        Some(v) if v.as_u64() == Some(MODEL_VERSION) => {}
        Some(v) => {
            return Err(GopError::format(
                "version",
                format!("unsupported model version {v}, expected {MODEL_VERSION}"),
            ))
        }
        None => return Err(GopError::format("version", "missing field")),
    }
    let doc: ModelDoc<T> = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        GopError::format(path, e.into_inner().to_string())
    })?;

    let mut hidden = Vec::with_capacity(doc.layers.len());
    for (l, layer) in doc.layers.into_iter().enumerate() {
        let mut blocks = Vec::with_capacity(layer.blocks.len());
        for (b, block) in layer.blocks.into_iter().enumerate() {
            let path = format!("layers[{l}].blocks[{b}]");
            let weights = matrix_from_doc(block.weights, &format!("{path}.weights"))?;
            let nb = NeuronBlock::new(block.op_set, weights, Array1::from(block.bias))
                .map_err(|e| GopError::format(path.clone(), e.to_string()))?;
            blocks.push(nb);
        }
        let norm = NormState {
            mode: layer.norm.mode,
            mean: Array1::from(layer.norm.mean),
            std: Array1::from(layer.norm.std),
            scale: Array1::from(layer.norm.scale),
            shift: Array1::from(layer.norm.shift),
        };
        let gl = GopLayer::new(blocks, norm)
            .map_err(|e| GopError::format(format!("layers[{l}]"), e.to_string()))?;
        hidden.push(gl);
    }
    let out_w = matrix_from_doc(doc.output.weights, "output.weights")?;
    if out_w.ncols() != doc.classes {
        return Err(GopError::format(
            "output.weights.cols",
            format!("expected C = {} columns, found {}", doc.classes, out_w.ncols()),
        ));
    }
    GopNetwork::new(doc.input_dim, hidden, out_w, Array1::from(doc.output.bias))
        .map_err(|e| GopError::format("$", e.to_string()))
}

pub fn save<T: Real>(net: &GopNetwork<T>, path: &Path) -> Result<()> {
    write_atomic(path, to_json(net).as_bytes())
}

pub fn load<T: Real>(path: &Path) -> Result<GopNetwork<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| GopError::io(path.display().to_string(), e))?;
    from_json(&text)
}

/// Writes `bytes` to a temporary file beside `path` and renames it into
/// place, so readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let io_err = |e: std::io::Error| GopError::io(path.display().to_string(), e);
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{ActivationOp, NodalOp, PoolOp};
    use ndarray::array;

    fn small_net() -> GopNetwork<f64> {
        let op = OperatorSet::new(NodalOp::Harmonic, PoolOp::Correlation1, ActivationOp::ELU);
        let block = NeuronBlock::new(op, array![[0.1, -0.2], [0.3, 0.4]], array![0.5, -0.6]).unwrap();
        let layer = GopLayer::new(vec![block], NormState::identity(2)).unwrap();
        GopNetwork::new(2, vec![layer], array![[1.0], [2.0]], array![0.25]).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let net = small_net();
        let back: GopNetwork<f64> = from_json(&to_json(&net)).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn unknown_operator_token_is_named() {
        let text = to_json(&small_net()).replace("\"harmonic\"", "\"cosine\"");
        let err = from_json::<f64>(&text).unwrap_err();
        match err {
            GopError::Format { path, message } => {
                assert_eq!(path, "layers[0].blocks[0].op_set.nodal");
                assert!(message.contains("cosine"), "{message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn version_mismatch() {
        let text = to_json(&small_net()).replacen("\"version\": 1", "\"version\": 2", 1);
        let err = from_json::<f64>(&text).unwrap_err();
        assert!(matches!(err, GopError::Format { ref path, .. } if path == "version"));
    }

    #[test]
    fn wrong_matrix_length() {
        let mut v: serde_json::Value = serde_json::from_str(&to_json(&small_net())).unwrap();
        v["output"]["weights"]["data"] = serde_json::json!([1.0]);
        let err = from_json::<f64>(&v.to_string()).unwrap_err();
        assert!(matches!(err, GopError::Format { ref path, .. } if path == "output.weights.data"));
    }
}
