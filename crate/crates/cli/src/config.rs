use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use slideseg_core::inference::InferenceConfig;
use slideseg_core::model::ModelConfig;
use slideseg_core::pseudo::PseudoConfig;
use slideseg_core::training::TrainConfig;

use crate::Failure;

/// Contents of the optional `--config` file. Every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub pseudo: PseudoConfig,
}

/// Reads the config file (if any) and applies `key=value` overrides.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, Failure> {
    let mut root = match path {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?;
            serde_json::from_slice::<Value>(&bytes).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for spec in overrides {
        apply_override(&mut root, spec).map_err(Failure::Usage)?;
    }
    serde_json::from_value(root).map_err(|e| Failure::Usage(format!("invalid configuration: {e}")))
}

/// Sets a dotted key; the value is parsed as JSON and falls back to a
/// plain string.
fn apply_override(root: &mut Value, spec: &str) -> Result<(), String> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("override must be KEY=VALUE, got '{spec}'"))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(format!("bad override key '{key}'"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| format!("'{key}' descends into a non-object"))?;
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| format!("'{key}' descends into a non-object"))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
