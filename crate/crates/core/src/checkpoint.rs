//! Versioned binary container for model and SAE parameters.
//!
//! Layout:
//!
//! ```text
//! b"STEERLAB" | u32 schema version | u64 header length | JSON header
//! | tensors as little-endian f64, row-major, in header order
//! | SHA-256 of everything before it
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::train::OptimizerState;
use crate::lm::{ModelConfig, ToyLm, Vocabulary};
use crate::sae::SaeModel;

pub const MAGIC: &[u8; 8] = b"STEERLAB";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    ToyLm,
    Sae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: ArtifactKind,
    #[serde(default)]
    pub model_config: Option<ModelConfig>,
    #[serde(default)]
    pub vocab: Vec<String>,
    #[serde(default)]
    pub lambda_l1: Option<f64>,
    #[serde(default)]
    pub optimizer_step: Option<usize>,
    pub tensors: Vec<TensorInfo>,
    /// Free-form provenance (training config, seeds, metrics).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of a parameter buffer's little-endian bytes.
pub fn params_digest(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode(header: &Header, tensors: &[&[f64]]) -> Result<Vec<u8>> {
    if header.tensors.len() != tensors.len() {
        return Err(Error::DimensionMismatch {
            context: "checkpoint tensors",
            expected: header.tensors.len(),
            got: tensors.len(),
        });
    }
    for (info, t) in header.tensors.iter().zip(tensors) {
        if info.shape[0] * info.shape[1] != t.len() {
            return Err(Error::Checkpoint(format!("tensor {} does not match its declared shape", info.name)));
        }
    }
    let json = serde_json::to_vec(header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n_values: usize = tensors.iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(20 + json.len() + 8 * n_values + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in *t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Header, Vec<Vec<f64>>)> {
    let corrupt = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 + 32 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing STEERLAB magic"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("content digest mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!("unsupported schema version {version}")));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize.checked_add(header_len).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("header length out of bounds"))?;
    let header: Header = serde_json::from_slice(&body[20..header_end]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut data = &body[header_end..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for info in &header.tensors {
        let n = info.shape[0].checked_mul(info.shape[1]).ok_or_else(|| corrupt("tensor shape overflow"))?;
        if data.len() < 8 * n {
            return Err(Error::Checkpoint(format!("tensor {} truncated", info.name)));
        }
        let (chunk, rest) = data.split_at(8 * n);
        tensors.push(chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect());
        data = rest;
    }
    if !data.is_empty() {
        return Err(corrupt("trailing bytes after tensors"));
    }
    Ok((header, tensors))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn model_to_bytes(model: &ToyLm, optimizer: Option<&OptimizerState>, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut infos: Vec<TensorInfo> = model
        .layout()
        .named()
        .iter()
        .map(|(name, s)| TensorInfo {
            name: name.clone(),
            shape: [s.rows, s.cols],
        })
        .collect();
    let mut tensors: Vec<&[f64]> = model.layout().named().iter().map(|(_, s)| &model.params()[s.range()]).collect();
    if let Some(opt) = optimizer {
        for (name, v) in [("optimizer.m", &opt.m), ("optimizer.v", &opt.v)] {
            infos.push(TensorInfo {
                name: name.into(),
                shape: [1, v.len()],
            });
            tensors.push(v);
        }
    }
    let header = Header {
        kind: ArtifactKind::ToyLm,
        model_config: Some(model.config().clone()),
        vocab: model.vocab().tokens().to_vec(),
        lambda_l1: None,
        optimizer_step: optimizer.map(|o| o.step),
        tensors: infos,
        meta,
    };
    encode(&header, &tensors)
}

pub fn save_model(path: &Path, model: &ToyLm, optimizer: Option<&OptimizerState>, meta: serde_json::Value) -> Result<()> {
    write_atomic(path, &model_to_bytes(model, optimizer, meta)?)
}

#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub model: ToyLm,
    pub optimizer: Option<OptimizerState>,
    pub meta: serde_json::Value,
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<LoadedModel> {
    let (header, tensors) = decode(bytes)?;
    if header.kind != ArtifactKind::ToyLm {
        return Err(Error::Checkpoint("not a model checkpoint".into()));
    }
    let cfg = header.model_config.clone().ok_or_else(|| Error::Checkpoint("model config missing".into()))?;
    let vocab = Vocabulary::from_tokens(header.vocab.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n_model = crate::lm::model::Layout::new(&cfg, vocab.len()).named().len();
    let has_opt = header.optimizer_step.is_some();
    if tensors.len() != n_model + if has_opt { 2 } else { 0 } {
        return Err(Error::Checkpoint("unexpected tensor count".into()));
    }
    let params: Vec<f64> = tensors[..n_model].concat();
    let model = ToyLm::from_parts(cfg, vocab, params).map_err(|e| Error::Checkpoint(e.to_string()))?;
    for ((name, s), info) in model.layout().named().iter().zip(&header.tensors) {
        if *name != info.name || [s.rows, s.cols] != info.shape {
            return Err(Error::Checkpoint(format!("tensor {} does not match the architecture", info.name)));
        }
    }
    let optimizer = match header.optimizer_step {
        Some(step) => {
            let (m, v) = (tensors[n_model].clone(), tensors[n_model + 1].clone());
            if m.len() != model.n_params() || v.len() != model.n_params() {
                return Err(Error::Checkpoint("optimizer state size mismatch".into()));
            }
            Some(OptimizerState { step, m, v })
        }
        None => None,
    };
    Ok(LoadedModel {
        model,
        optimizer,
        meta: header.meta,
    })
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    model_from_bytes(&fs::read(path)?)
}

pub fn sae_to_bytes(sae: &SaeModel, meta: serde_json::Value) -> Result<Vec<u8>> {
    let t = sae.tensors();
    let header = Header {
        kind: ArtifactKind::Sae,
        model_config: None,
        vocab: vec![],
        lambda_l1: Some(sae.lambda_l1),
        optimizer_step: None,
        tensors: t
            .iter()
            .map(|(name, _, shape)| TensorInfo {
                name: name.to_string(),
                shape: *shape,
            })
            .collect(),
        meta,
    };
    let data: Vec<&[f64]> = t.iter().map(|(_, d, _)| *d).collect();
    encode(&header, &data)
}

pub fn save_sae(path: &Path, sae: &SaeModel, meta: serde_json::Value) -> Result<()> {
    write_atomic(path, &sae_to_bytes(sae, meta)?)
}

pub fn sae_from_bytes(bytes: &[u8]) -> Result<(SaeModel, serde_json::Value)> {
    let (header, mut tensors) = decode(bytes)?;
    if header.kind != ArtifactKind::Sae || tensors.len() != 4 {
        return Err(Error::Checkpoint("not an SAE checkpoint".into()));
    }
    let shape = |i: usize| header.tensors[i].shape;
    let bad = |e: ndarray::ShapeError| Error::Checkpoint(e.to_string());
    let b_dec = Array1::from(tensors.pop().expect("4"));
    let w_dec = Array2::from_shape_vec((shape(2)[0], shape(2)[1]), tensors.pop().expect("3")).map_err(bad)?;
    let b_enc = Array1::from(tensors.pop().expect("2"));
    let w_enc = Array2::from_shape_vec((shape(0)[0], shape(0)[1]), tensors.pop().expect("1")).map_err(bad)?;
    let lambda = header.lambda_l1.unwrap_or(0.0);
    let sae = SaeModel::new(w_enc, b_enc, w_dec, b_dec, lambda).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((sae, header.meta))
}

pub fn load_sae(path: &Path) -> Result<(SaeModel, serde_json::Value)> {
    sae_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> ToyLm {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_mlp: 8,
            context_window: 64,
        };
        ToyLm::initialized(cfg, Vocabulary::game(), 0.1, 4).unwrap()
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let m = small_model();
        let opt = OptimizerState {
            step: 7,
            m: vec![0.25; m.n_params()],
            v: vec![f64::MIN_POSITIVE; m.n_params()],
        };
        let bytes = model_to_bytes(&m, Some(&opt), serde_json::json!({"seed": 1})).unwrap();
        let back = model_from_bytes(&bytes).unwrap();
        let same = m.params().iter().zip(back.model.params()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
        assert_eq!(back.optimizer, Some(opt));
        assert_eq!(back.model.config(), m.config());
        assert_eq!(back.meta["seed"], 1);
    }

    #[test]
    fn flipped_byte_is_rejected() {
        let m = small_model();
        let mut bytes = model_to_bytes(&m, None, serde_json::Value::Null).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(model_from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(matches!(model_from_bytes(b"not a checkpoint at all, really not"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn sae_round_trip() {
        let sae = SaeModel::initialized(4, 8, 0.01, Array1::from(vec![0.5; 4]).view(), 3).unwrap();
        let (back, _) = sae_from_bytes(&sae_to_bytes(&sae, serde_json::Value::Null).unwrap()).unwrap();
        assert_eq!(back, sae);
        let bytes = sae_to_bytes(&sae, serde_json::Value::Null).unwrap();
        assert!(model_from_bytes(&bytes).is_err());
    }
}
