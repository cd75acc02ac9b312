//! Layered configuration: built-in defaults < config file < flags.
//!
//! Every layer is merged as a JSON tree so that a file or flag only needs to
//! name the keys it changes. Keys absent from the defaults are rejected,
//! which catches typos that serde's `default` would otherwise swallow.

use std::fs;
use std::path::Path;

use gmoe_core::model::{Architecture, ModelConfig, Placement};
use gmoe_core::moe::{RouterConfig, RouterKind};
use gmoe_core::tensor::Activation;
use gmoe_core::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("cannot parse {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("flag `{0}` must have the form key=value")]
    BadAssignment(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Gmoe,
    Mlp,
    Fcn,
}

/// Model choice for training on a patch dataset; the input shape and class
/// count come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub activation: Activation,
    pub placement: Placement,
    pub router: RouterKind,
    pub experts: usize,
    pub k: usize,
    /// Hidden widths of the MLP backbone.
    pub mlp_hidden: Vec<usize>,
    pub fcn_filters: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kind: ModelKind::Gmoe,
            depth: 2,
            dim: 16,
            heads: 2,
            mlp_ratio: 2,
            activation: Activation::Gelu,
            placement: Placement::EveryTwo,
            router: RouterKind::Cosine,
            experts: 4,
            k: 2,
            mlp_hidden: vec![100, 100],
            fcn_filters: gmoe_core::model::FCN_FILTERS,
        }
    }
}

impl ModelSpec {
    /// Architecture for `[n × patches × classes]` inputs. The GMoE reads them
    /// as `classes`-channel images of one row of `patches` pixels with patch
    /// size 1, so every patch is one token.
    pub fn architecture(&self, patches: usize, classes: usize) -> Architecture {
        match self.kind {
            ModelKind::Gmoe => Architecture::Gmoe(ModelConfig {
                depth: self.depth,
                dim: self.dim,
                heads: self.heads,
                patch_size: 1,
                channels: classes,
                image_height: 1,
                image_width: patches,
                num_classes: classes,
                mlp_ratio: self.mlp_ratio,
                activation: self.activation,
                placement: self.placement.clone(),
                moe: RouterConfig::new(self.router, self.experts, self.k),
            }),
            ModelKind::Mlp => {
                let mut widths = vec![patches * classes];
                widths.extend(&self.mlp_hidden);
                widths.push(classes);
                Architecture::Mlp { widths }
            }
            ModelKind::Fcn => Architecture::Fcn {
                channels: classes,
                filters: self.fcn_filters,
                classes,
            },
        }
    }
}

/// Everything `train` needs besides the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Parses a TOML or JSON document by extension (`.json` is JSON, anything
/// else TOML). A run manifest is accepted too; its resolved `config` is used.
pub fn read_document(path: &Path) -> Result<Value, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.display().to_string(),
        source,
    })?;
    let parse_err = |reason: String| ConfigError::Parse {
        path: path.display().to_string(),
        reason,
    };
    let value: Value = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?
    } else {
        toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?
    };
    match value {
        Value::Object(mut m) if m.contains_key("command") && m.contains_key("config") => Ok(m.remove("config").unwrap_or_default()),
        v => Ok(v),
    }
}

/// Overlays `top` on `base`; objects merge key by key, anything else is
/// replaced. Keys of `top` missing from `base` are rejected.
pub fn merge(base: &mut Value, top: Value, path: &str) -> Result<(), ConfigError> {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                let full = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &full)?,
                    None => return Err(ConfigError::UnknownKey(full)),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Parses a flag value: JSON literals (numbers, booleans, arrays, quoted
/// strings) as such, anything else as a bare string.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Turns `a.b.c=v` into the nested object `{a: {b: {c: v}}}`.
pub fn assignment(raw: &str) -> Result<Value, ConfigError> {
    let (key, value) = raw.split_once('=').ok_or_else(|| ConfigError::BadAssignment(raw.to_string()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::BadAssignment(raw.to_string()));
    }
    Ok(nested(key, parse_value(value.trim())))
}

pub fn nested(dotted: &str, value: Value) -> Value {
    dotted.rsplit('.').fold(value, |acc, k| {
        let mut m = Map::new();
        m.insert(k.to_string(), acc);
        Value::Object(m)
    })
}

/// Resolves `C` from its defaults, an optional file and flag overrides
/// (applied in order).
pub fn resolve<C>(file: Option<&Path>, overrides: Vec<Value>) -> Result<(C, Value), ConfigError>
where
    C: Default + Serialize + DeserializeOwned,
{
    let mut value = serde_json::to_value(C::default()).expect("defaults are serializable");
    if let Some(path) = file {
        merge(&mut value, read_document(path)?, "")?;
    }
    for o in overrides {
        merge(&mut value, o, "")?;
    }
    let config = serde_json::from_value(value.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    // Re-serialize so the recorded tree is exactly what was parsed.
    let resolved = serde_json::to_value(&config).expect("configuration is serializable");
    Ok((config, resolved))
}
