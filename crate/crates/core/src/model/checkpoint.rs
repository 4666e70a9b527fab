//! Versioned JSON checkpoints. Floats are written in shortest round-trip
//! form, so a save/load cycle reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams, ParamId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    schema_version: u32,
    model_config: ModelConfig,
    params: Vec<ParamEntry>,
}

pub fn encode_checkpoint(params: &ModelParams) -> Result<String> {
    let doc = CheckpointDoc {
        schema_version: CHECKPOINT_SCHEMA,
        model_config: params.config.clone(),
        params: params
            .iter()
            .map(|(id, t)| ParamEntry {
                name: id.name().to_string(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    Ok(text)
}

/// Parses a checkpoint. When `expected` is given, the declared model config
/// must equal it.
pub fn decode_checkpoint(text: &str, expected: Option<&ModelConfig>) -> Result<ModelParams> {
    let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
    let version = raw
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Format("checkpoint has no schema_version".into()))?;
    if version != u64::from(CHECKPOINT_SCHEMA) {
        return Err(Error::Version {
            expected: CHECKPOINT_SCHEMA,
            found: u32::try_from(version).unwrap_or(u32::MAX),
        });
    }
    let doc: CheckpointDoc = serde_json::from_value(raw).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
    doc.model_config.validate()?;
    if let Some(exp) = expected {
        if exp != &doc.model_config {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint declares {:?}, run expects {:?}",
                doc.model_config, exp
            )));
        }
    }
    let mut tensors = Vec::with_capacity(doc.params.len());
    let mut seen = std::collections::BTreeSet::new();
    for entry in doc.params {
        let id = ParamId::from_name(&entry.name)
            .ok_or_else(|| Error::Format(format!("unknown parameter `{}`", entry.name)))?;
        if !seen.insert(id) {
            return Err(Error::Format(format!("duplicate parameter `{}`", entry.name)));
        }
        let t = Tensor::new(&entry.shape, entry.values).map_err(|e| Error::Format(format!("`{}`: {e}", entry.name)))?;
        t.ensure_finite(id.name())?;
        tensors.push((id, t));
    }
    ModelParams::from_tensors(&doc.model_config, tensors)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<ModelParams> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    decode_checkpoint(&text, expected)
}
