//! Self-describing JSON checkpoints.
//!
//! Arrays are stored as nested decimal lists. Every float is written in its
//! shortest round-trip form and parsed back with exact rounding, so a save
//! and load cycle reproduces every bit.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelDims, ModelParams, PretrainConfig, ACTION_DIM};
use crate::error::CheckpointError;

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub pretrain: Option<PretrainConfig>,
    /// Free-form provenance (setting, dataset size, ...).
    pub notes: serde_json::Map<String, serde_json::Value>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Arrays {
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w_dep: Vec<Vec<f64>>,
    b_dep: Vec<f64>,
    w_img: Vec<Vec<f64>>,
    d_res: Vec<f64>,
    b_img: Vec<f64>,
    w_act: Vec<Vec<f64>>,
    b_act: Vec<f64>,
    w_s: Vec<f64>,
    b_s: f64,
    q: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    schema_version: u64,
    dims: ModelDims,
    arrays: Arrays,
    pretrain: Option<PretrainConfig>,
    #[serde(default)]
    notes: serde_json::Map<String, serde_json::Value>,
    seed: u64,
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn matrix(name: &str, data: Vec<Vec<f64>>, shape: (usize, usize)) -> Result<Array2<f64>, CheckpointError> {
    if data.len() != shape.0 || data.iter().any(|r| r.len() != shape.1) {
        return Err(CheckpointError::Dimension(format!(
            "`{name}` should be {}x{}",
            shape.0, shape.1
        )));
    }
    let flat: Vec<f64> = data.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec(shape, flat).expect("shape checked"))
}

fn vector(name: &str, data: Vec<f64>, len: usize) -> Result<Array1<f64>, CheckpointError> {
    if data.len() != len {
        return Err(CheckpointError::Dimension(format!(
            "`{name}` has length {} (expected {len})",
            data.len()
        )));
    }
    Ok(Array1::from(data))
}

impl Checkpoint {
    pub fn new(params: ModelParams, seed: u64) -> Self {
        Self {
            params,
            pretrain: None,
            notes: Default::default(),
            seed,
        }
    }

    pub fn to_text(&self) -> Result<String, CheckpointError> {
        if !self.params.is_finite() {
            return Err(CheckpointError::Malformed(
                "refusing to serialize non-finite parameters".into(),
            ));
        }
        let p = &self.params;
        let doc = Document {
            schema_version: SCHEMA_VERSION,
            dims: p.dims,
            arrays: Arrays {
                w1: rows(&p.w1),
                b1: p.b1.to_vec(),
                w_dep: rows(&p.w_dep),
                b_dep: p.b_dep.to_vec(),
                w_img: rows(&p.w_img),
                d_res: p.d_res.to_vec(),
                b_img: p.b_img.to_vec(),
                w_act: rows(&p.w_act),
                b_act: p.b_act.to_vec(),
                w_s: p.w_s.to_vec(),
                b_s: p.b_s,
                q: p.q.to_vec(),
            },
            pretrain: self.pretrain.clone(),
            notes: self.notes.clone(),
            seed: self.seed,
        };
        let mut text = serde_json::to_string_pretty(&doc)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_text(text: &str) -> Result<Self, CheckpointError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let version = value
            .get("schema_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| CheckpointError::Malformed("missing `schema_version`".into()))?;
        if version != SCHEMA_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: SCHEMA_VERSION,
            });
        }
        let doc: Document =
            serde_json::from_value(value).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let d = doc.dims;
        d.validate()
            .map_err(|e| CheckpointError::Dimension(e.to_string()))?;
        let a = doc.arrays;
        let params = ModelParams {
            dims: d,
            w1: matrix("w1", a.w1, (d.hidden(), d.input()))?,
            b1: vector("b1", a.b1, d.hidden())?,
            w_dep: matrix("w_dep", a.w_dep, (d.dep, d.img + d.act))?,
            b_dep: vector("b_dep", a.b_dep, d.dep)?,
            w_img: matrix("w_img", a.w_img, (d.obs, d.inst + d.img))?,
            d_res: vector("d_res", a.d_res, d.obs)?,
            b_img: vector("b_img", a.b_img, d.obs)?,
            w_act: matrix("w_act", a.w_act, (ACTION_DIM, d.dep))?,
            b_act: vector("b_act", a.b_act, ACTION_DIM)?,
            w_s: vector("w_s", a.w_s, d.dep)?,
            b_s: a.b_s,
            q: vector("q", a.q, d.query)?,
        };
        Ok(Checkpoint {
            params,
            pretrain: doc.pretrain,
            notes: doc.notes,
            seed: doc.seed,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let text = checkpoint.to_text()?;
    fs::write(path, text).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_text(&text)
}

/// SHA-256 of the serialized checkpoint, hex encoded.
pub fn checkpoint_digest(checkpoint: &Checkpoint) -> Result<String, CheckpointError> {
    let text = checkpoint.to_text()?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

#[cfg(test)]
mod tests {
    use super::super::test_support::random_params;
    use super::*;

    fn bits(p: &ModelParams) -> Vec<u64> {
        p.fields()
            .iter()
            .flat_map(|(_, f)| f.iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut p = random_params(1, 1.0);
        // Awkward values for decimal printing.
        p.b_s = 0.1 + 0.2;
        p.q[0] = f64::MIN_POSITIVE;
        p.q[1] = -1.0 / 3.0;
        p.w1[[0, 0]] = 5e-324;
        let mut ck = Checkpoint::new(p, 99);
        ck.pretrain = Some(PretrainConfig::default());
        ck.notes.insert("setting".into(), "without".into());
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(bits(&back.params), bits(&ck.params));
        assert_eq!(back, ck);
        assert_eq!(back.to_text().unwrap(), ck.to_text().unwrap());
    }

    #[test]
    fn truncated_file_is_malformed() {
        let text = Checkpoint::new(random_params(2, 0.1), 0).to_text().unwrap();
        let cut = &text[..text.len() / 2];
        assert!(matches!(Checkpoint::from_text(cut), Err(CheckpointError::Malformed(_))));
    }

    #[test]
    fn future_schema_is_a_version_error() {
        let text = Checkpoint::new(random_params(3, 0.1), 0).to_text().unwrap();
        let bumped = text.replacen("\"schema_version\": 1", "\"schema_version\": 999", 1);
        assert!(matches!(
            Checkpoint::from_text(&bumped),
            Err(CheckpointError::Version { found: 999, expected: 1 })
        ));
    }

    #[test]
    fn wrong_shape_is_a_dimension_error() {
        let text = Checkpoint::new(random_params(4, 0.1), 0).to_text().unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["arrays"]["q"].as_array_mut().unwrap().pop();
        let err = Checkpoint::from_text(&v.to_string()).unwrap_err();
        assert!(matches!(err, CheckpointError::Dimension(_)), "{err}");
    }

    #[test]
    fn missing_file_is_io() {
        let err = load_checkpoint(Path::new("/nonexistent/ckpt.json")).unwrap_err();
        assert!(matches!(err, CheckpointError::Io { .. }));
    }
}
