use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::NetworkWeights;

pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed weights document: {0}")]
    Parse(String),
    #[error("unsupported weights format_version {found} (expected {WEIGHTS_FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("weights array `{0}` is missing")]
    MissingArray(String),
    #[error("unexpected weights array `{0}`")]
    UnknownArray(String),
    #[error("weights array `{name}` has shape {found:?}, expected {expected:?} for d = {d}, L = {layers}")]
    ShapeMismatch {
        name: String,
        expected: [usize; 2],
        found: [usize; 2],
        d: usize,
        layers: usize,
    },
    #[error("weights array `{name}` declares shape {shape:?} but holds {len} values")]
    LengthMismatch { name: String, shape: [usize; 2], len: usize },
    #[error("weights array `{0}` contains non-finite values")]
    NonFinite(String),
    #[error("invalid inverse-variance bounds {0:?}")]
    InvalidBounds([f64; 2]),
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayRecord {
    name: String,
    shape: [usize; 2],
    values: Vec<f64>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsDocument {
    format_version: u32,
    d: usize,
    #[serde(rename = "L")]
    layers: usize,
    #[serde(default = "default_true")]
    attention: bool,
    #[serde(default)]
    ivar_bounds: Option<[f64; 2]>,
    #[serde(default)]
    median_inverse_variances: Option<[f64; 5]>,
    #[serde(default)]
    epoch_losses: Vec<f64>,
    arrays: Vec<ArrayRecord>,
}

pub fn weights_to_json(w: &NetworkWeights) -> String {
    let doc = WeightsDocument {
        format_version: WEIGHTS_FORMAT_VERSION,
        d: w.d,
        layers: w.layers(),
        attention: w.attention_enabled,
        ivar_bounds: Some(w.ivar_bounds),
        median_inverse_variances: w.median_inverse_variances,
        epoch_losses: w.epoch_losses.clone(),
        arrays: w
            .arrays()
            .into_iter()
            .map(|(name, a)| ArrayRecord {
                name,
                shape: [a.nrows(), a.ncols()],
                // Row-major.
                values: a.transpose().as_slice().to_vec(),
            })
            .collect(),
    };
    serde_json::to_string(&doc).expect("weights serialize")
}

pub fn weights_from_json(s: &str) -> Result<NetworkWeights, WeightsError> {
    let doc: WeightsDocument = serde_json::from_str(s).map_err(|e| WeightsError::Parse(e.to_string()))?;
    if doc.format_version != WEIGHTS_FORMAT_VERSION {
        return Err(WeightsError::Version {
            found: doc.format_version,
        });
    }
    let mut w = NetworkWeights::zeros(doc.d, doc.layers);
    w.attention_enabled = doc.attention;
    if let Some(b) = doc.ivar_bounds {
        if !(b[0] >= 0.0 && b[1] >= b[0] && b[1].is_finite()) {
            return Err(WeightsError::InvalidBounds(b));
        }
        w.ivar_bounds = b;
    }
    w.median_inverse_variances = doc.median_inverse_variances;
    w.epoch_losses = doc.epoch_losses;

    let expected: Vec<(String, [usize; 2])> = w.arrays().into_iter().map(|(n, a)| (n, [a.nrows(), a.ncols()])).collect();
    let mut records: std::collections::HashMap<String, ArrayRecord> = std::collections::HashMap::new();
    for r in doc.arrays {
        if !expected.iter().any(|(n, _)| *n == r.name) {
            return Err(WeightsError::UnknownArray(r.name));
        }
        records.insert(r.name.clone(), r);
    }
    let (d, layers) = (w.d, w.layers());
    for ((name, shape), slot) in expected.into_iter().zip(w.arrays_mut()) {
        let rec = records
            .remove(&name)
            .ok_or_else(|| WeightsError::MissingArray(name.clone()))?;
        if rec.shape != shape {
            return Err(WeightsError::ShapeMismatch {
                name,
                expected: shape,
                found: rec.shape,
                d,
                layers,
            });
        }
        if rec.values.len() != shape[0] * shape[1] {
            return Err(WeightsError::LengthMismatch {
                name,
                shape,
                len: rec.values.len(),
            });
        }
        if rec.values.iter().any(|v| !v.is_finite()) {
            return Err(WeightsError::NonFinite(name));
        }
        *slot = DMatrix::from_row_slice(shape[0], shape[1], &rec.values);
    }
    Ok(w)
}

pub fn save_weights(path: &Path, w: &NetworkWeights) -> Result<(), WeightsError> {
    std::fs::write(path, weights_to_json(w)).map_err(|source| WeightsError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_weights(path: &Path) -> Result<NetworkWeights, WeightsError> {
    let s = std::fs::read_to_string(path).map_err(|source| WeightsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    weights_from_json(&s)
}
