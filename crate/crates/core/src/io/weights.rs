//! JSON weight documents.
//!
//! ```text
//! {"format_version": 1,
//!  "meta": {"d": 32, "H": 4, "K": 2, "L_I": 8, "L_B": 8, "d_ff": 64, "precision": "f64"},
//!  "tensors": {"lemb0": {"shape": [8, 32], "data": [...]}, ...}}
//! ```
//!
//! Reals are written with 17 significant digits so every `f64` survives a
//! round trip exactly.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use super::table::format_real;
use crate::cmanp::CmanpModel;
use crate::config::ModelConfig;
use crate::error::{contract, Error, Result};
use crate::numerics::Matrix;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    d: usize,
    #[serde(rename = "H")]
    heads: usize,
    #[serde(rename = "K")]
    blocks: usize,
    #[serde(rename = "L_I")]
    l_i: usize,
    #[serde(rename = "L_B")]
    l_b: usize,
    d_ff: usize,
    precision: String,
}

#[derive(Serialize)]
struct TensorOut {
    shape: [usize; 2],
    data: Vec<Box<RawValue>>,
}

#[derive(Serialize)]
struct DocumentOut {
    format_version: u32,
    meta: Meta,
    tensors: IndexMap<String, TensorOut>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorIn {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DocumentIn {
    format_version: u32,
    meta: Meta,
    tensors: IndexMap<String, TensorIn>,
}

pub fn weights_to_string(model: &CmanpModel) -> Result<String> {
    let cfg = model.config;
    let mut tensors = IndexMap::new();
    for (name, m) in model.named_tensors() {
        if !m.is_finite() {
            return Err(Error::NonFinite(format!("tensor {name}")));
        }
        let data = m
            .as_slice()
            .iter()
            .map(|&v| RawValue::from_string(format_real(v)))
            .collect::<serde_json::Result<Vec<_>>>()?;
        tensors.insert(
            name,
            TensorOut {
                shape: [m.rows(), m.cols()],
                data,
            },
        );
    }
    let doc = DocumentOut {
        format_version: FORMAT_VERSION,
        meta: Meta {
            d: cfg.d,
            heads: cfg.heads,
            blocks: cfg.blocks,
            l_i: cfg.l_i,
            l_b: cfg.l_b,
            d_ff: cfg.d_ff,
            precision: "f64".into(),
        },
        tensors,
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    Ok(text)
}

pub fn save_weights(model: &CmanpModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, weights_to_string(model)?)?;
    Ok(())
}

pub fn load_weights_str(text: &str) -> Result<CmanpModel> {
    let doc: DocumentIn = serde_json::from_str(text)?;
    if doc.format_version != FORMAT_VERSION {
        return Err(Error::Unsupported(format!(
            "weight format_version {}",
            doc.format_version
        )));
    }
    if doc.meta.precision != "f64" {
        return Err(Error::Unsupported(format!(
            "weight precision {:?}",
            doc.meta.precision
        )));
    }
    let m = &doc.meta;
    let config = ModelConfig {
        d_ff: m.d_ff,
        ..ModelConfig::new(m.d, m.heads, m.blocks, m.l_i, m.l_b)
    };
    let mut tensors = doc.tensors;
    let model = CmanpModel::from_named(config, |name| {
        let t = tensors
            .shift_remove(name)
            .ok_or_else(|| Error::Contract(format!("weight file is missing tensor {name}")))?;
        match t.shape[..] {
            [r, c] => Matrix::from_vec(r, c, t.data),
            _ => contract(format!(
                "tensor {name} must be 2-D, got shape {:?}",
                t.shape
            )),
        }
    })?;
    if let Some(extra) = tensors.keys().next() {
        return contract(format!("weight file has unexpected tensor {extra}"));
    }
    Ok(model)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<CmanpModel> {
    load_weights_str(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = CmanpModel::init(&mut RngState::new(4), ModelConfig::tiny()).unwrap();
        let first = weights_to_string(&model).unwrap();
        let back = load_weights_str(&first).unwrap();
        assert_eq!(first, weights_to_string(&back).unwrap());
        for ((_, a), (_, b)) in model.named_tensors().into_iter().zip(back.named_tensors()) {
            assert!(a
                .as_slice()
                .iter()
                .zip(b.as_slice())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn header_fields() {
        let model = CmanpModel::init(&mut RngState::new(4), ModelConfig::tiny()).unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&weights_to_string(&model).unwrap()).unwrap();
        assert_eq!(v["format_version"], 1);
        assert_eq!(v["meta"]["H"], 2);
        assert_eq!(v["meta"]["L_B"], 4);
        assert_eq!(v["meta"]["precision"], "f64");
        assert_eq!(v["tensors"]["lemb0"]["shape"], serde_json::json!([4, 16]));
    }

    #[test]
    fn rejects_bad_documents() {
        let model = CmanpModel::init(&mut RngState::new(4), ModelConfig::tiny()).unwrap();
        let text = weights_to_string(&model).unwrap();
        assert!(load_weights_str(&text.replacen(
            "\"format_version\": 1",
            "\"format_version\": 2",
            1
        ))
        .is_err());
        assert!(load_weights_str(&text.replacen("\"lemb0\"", "\"lemb9\"", 1)).is_err());
        assert!(load_weights_str(&text.replacen("\"d_ff\": 32", "\"d_ff\": 33", 1)).is_err());
        assert!(load_weights_str("{").is_err());
    }
}
