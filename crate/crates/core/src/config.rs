//! Run configuration files: JSON with dotted `key=value` overrides and a
//! content hash recorded in every artifact.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::CorpusSpec;
use crate::error::{Error, Result};
use crate::eval::EvalSpec;
use crate::infer::GenerationParams;
use crate::train::TrainConfig;

/// SHA-256 of the compact JSON serialization, hex encoded.
pub fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Applies `key.path=value` to a JSON tree. The value is parsed as JSON
/// when possible and otherwise taken as a string. Every key on the path must
/// already exist, so typos are rejected rather than silently added.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) =
        assignment.split_once('=').ok_or_else(|| Error::Config(format!("override {assignment:?} lacks '='")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| Error::Config(format!("{key}: {part} is not inside an object")))?;
        let child = obj.get_mut(*part).ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        if i + 1 == parts.len() {
            *child = value;
            return Ok(());
        }
        node = child;
    }
    Err(Error::Config("empty override key".into()))
}

/// Parses `base` (or the defaults when `None`), applies overrides and
/// deserializes, rejecting unknown keys.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(base: Option<&str>, overrides: &[String]) -> Result<T> {
    let mut tree = serde_json::to_value(T::default())?;
    if let Some(text) = base {
        let given: Value = serde_json::from_str(text)?;
        merge(&mut tree, given);
    }
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))
}

fn merge(base: &mut Value, given: Value) {
    match (base, given) {
        (Value::Object(b), Value::Object(g)) => {
            for (k, v) in g {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Transfusion,
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSpec {
    pub codebook_size: usize,
    pub kmeans_iters: usize,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        Self { codebook_size: 64, kmeans_iters: 25 }
    }
}

/// Everything a CLI invocation may configure.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    pub corpus: CorpusSpec,
    pub train: TrainConfig,
    pub generation: GenerationParams,
    pub eval: EvalSpec,
    pub baseline: BaselineSpec,
}

impl RunConfig {
    pub fn hash(&self) -> Result<String> {
        hash_json(self)
    }
}
