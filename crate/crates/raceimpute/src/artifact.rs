//! Self-describing model files: a JSON envelope with a format tag, version,
//! kind and a SHA-256 checksum over the canonical payload text.

use std::fs;
use std::path::Path;

use raceimpute_core::gbdt::{GbdtConfig, GbdtModel, GridResult};
use raceimpute_core::lstm::{LstmGeoConfig, LstmGeoModel, TrainingMeta, Vocabulary};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{AppError, AppResult};

pub const FORMAT: &str = "raceimpute-model";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArtifactKind {
    Lstm,
    GbdtFilter,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    kind: ArtifactKind,
    checksum: String,
    payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LstmPayload {
    config: LstmGeoConfig,
    vocabulary: Vocabulary,
    tensors: Vec<NamedTensor>,
    meta: TrainingMeta,
}

/// The post-filter together with the checksum of the LSTM+Geo model whose
/// outputs it was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterArtifact {
    pub model: GbdtModel,
    pub chosen: GbdtConfig,
    pub grid: Vec<GridResult>,
    pub base_model_checksum: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn payload_checksum(payload: &Value) -> String {
    // serde_json's Value keeps object keys sorted, so this text is canonical
    sha256_hex(serde_json::to_string(payload).expect("Value always serializes").as_bytes())
}

fn format_err(path: &Path, message: impl Into<String>) -> AppError {
    AppError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn write_envelope(path: &Path, kind: ArtifactKind, payload: Value) -> AppResult<String> {
    let checksum = payload_checksum(&payload);
    let env = Envelope {
        format: FORMAT.into(),
        version: VERSION,
        kind,
        checksum: checksum.clone(),
        payload,
    };
    let mut text = serde_json::to_string(&env).map_err(|e| format_err(path, e.to_string()))?;
    text.push('\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| AppError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| AppError::io(path, e))?;
    Ok(checksum)
}

/// Reads and verifies an envelope; returns the payload and its checksum.
fn read_envelope(path: &Path, expected: ArtifactKind) -> AppResult<(Value, String)> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    let env: Envelope = serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))?;
    if env.format != FORMAT {
        return Err(format_err(path, format!("not a model file (format {:?})", env.format)));
    }
    if env.version != VERSION {
        return Err(format_err(path, format!("unsupported model file version {}", env.version)));
    }
    if env.kind != expected {
        return Err(format_err(path, format!("expected a {expected:?} model, found {:?}", env.kind)));
    }
    let actual = payload_checksum(&env.payload);
    if actual != env.checksum {
        return Err(format_err(path, format!("checksum mismatch: stored {}, computed {actual}", env.checksum)));
    }
    Ok((env.payload, actual))
}

pub fn save_lstm(path: &Path, model: &LstmGeoModel) -> AppResult<String> {
    let tensors = model
        .layout
        .tensors()
        .into_iter()
        .map(|t| NamedTensor {
            values: model.params[t.offset..t.offset + t.len()].to_vec(),
            name: t.name,
            shape: t.shape,
        })
        .collect();
    let payload = LstmPayload {
        config: model.config.clone(),
        vocabulary: model.vocabulary(),
        tensors,
        meta: model.meta.clone(),
    };
    let value = serde_json::to_value(&payload).map_err(|e| format_err(path, e.to_string()))?;
    write_envelope(path, ArtifactKind::Lstm, value)
}

/// Loads a model and checks every tensor's name and shape against the
/// layout implied by the stored config.
pub fn load_lstm(path: &Path) -> AppResult<(LstmGeoModel, String)> {
    let (value, checksum) = read_envelope(path, ArtifactKind::Lstm)?;
    let payload: LstmPayload = serde_json::from_value(value).map_err(|e| format_err(path, e.to_string()))?;
    let model = LstmGeoModel::init(&payload.config).map_err(|e| AppError::core(path.display().to_string(), e))?;
    if payload.vocabulary != model.vocabulary() {
        return Err(format_err(path, "vocabulary does not match the configured geo mode"));
    }
    let specs = model.layout.tensors();
    if specs.len() != payload.tensors.len() {
        return Err(format_err(
            path,
            format!("expected {} tensors, found {}", specs.len(), payload.tensors.len()),
        ));
    }
    let mut params = Vec::with_capacity(model.layout.total);
    for (spec, t) in specs.iter().zip(&payload.tensors) {
        if spec.name != t.name || spec.shape != t.shape || t.values.len() != spec.len() {
            return Err(format_err(
                path,
                format!("tensor {} {:?} does not match expected {} {:?}", t.name, t.shape, spec.name, spec.shape),
            ));
        }
        params.extend_from_slice(&t.values);
    }
    let model = LstmGeoModel::from_params(payload.config, params, payload.meta)
        .map_err(|e| AppError::core(path.display().to_string(), e))?;
    Ok((model, checksum))
}

pub fn save_filter(path: &Path, artifact: &FilterArtifact) -> AppResult<String> {
    let value = serde_json::to_value(artifact).map_err(|e| format_err(path, e.to_string()))?;
    write_envelope(path, ArtifactKind::GbdtFilter, value)
}

pub fn load_filter(path: &Path) -> AppResult<FilterArtifact> {
    let (value, _) = read_envelope(path, ArtifactKind::GbdtFilter)?;
    let artifact: FilterArtifact = serde_json::from_value(value).map_err(|e| format_err(path, e.to_string()))?;
    artifact
        .model
        .check_invariants()
        .map_err(|e| AppError::core(path.display().to_string(), e))?;
    Ok(artifact)
}
