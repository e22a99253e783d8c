//! Run configuration with a flat, dotted-key JSON representation.
//!
//! Keys are grouped by section: `train.*`, `optim.*`, `schedule.*`,
//! `quantizer.*`, `sensitivity.*`, `hutch.*`, `model.*`, `task.*`, plus the
//! top-level `seed` and `output_dir`. Component seeds are derived from the
//! single run seed and are not separately settable. Unknown keys are
//! rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{HestiaError, Result};
use crate::models::data::{SyntheticTask, TaskKind};
use crate::models::{MlpSpec, ModelSpec, Nonlinearity, TinyTransformerSpec};
use crate::rng;
use crate::sensitivity::SensitivityConfig;
use crate::trainer::TrainConfig;

const MODEL_SEED_STREAM: u64 = 1;

/// Flat key prefix -> path inside the nested document.
const SECTIONS: [(&str, &[&str]); 8] = [
    ("optim", &["train", "optim"]),
    ("schedule", &["train", "schedule"]),
    ("quantizer", &["train", "quantizer"]),
    ("hutch", &["sensitivity", "hutch"]),
    ("train", &["train"]),
    ("sensitivity", &["sensitivity"]),
    ("model", &["model"]),
    ("task", &["task"]),
];

/// Nested paths that are derived rather than configured.
const DERIVED: [&[&str]; 5] = [
    &["train", "seed"],
    &["train", "schedule", "total_steps"],
    &["sensitivity", "hutch", "seed"],
    &["model", "seed"],
    &["task", "seed"],
];

/// Objects stored whole under one key instead of being flattened.
const OPAQUE: [&[&str]; 1] = [&["model", "init_gains"]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    pub sensitivity: SensitivityConfig,
    pub model: ModelSpec,
    pub task: SyntheticTask,
}

fn config_err(msg: impl Into<String>) -> HestiaError {
    HestiaError::Config(msg.into())
}

pub fn default_mlp(seed: u64) -> ModelSpec {
    ModelSpec::Mlp(MlpSpec {
        input_dim: 16,
        hidden: vec![64, 64],
        output_dim: 1,
        nonlinearity: Nonlinearity::Relu,
        seed,
        random_bias: false,
    })
}

pub fn default_transformer(seed: u64) -> ModelSpec {
    ModelSpec::Transformer(TinyTransformerSpec::new(32, 32, 16, seed))
}

pub fn default_task(kind: TaskKind, seed: u64) -> SyntheticTask {
    match kind {
        TaskKind::TeacherStudentRegression => SyntheticTask::teacher_student(seed),
        TaskKind::GaussianClusterClassification => SyntheticTask::clusters(seed),
        TaskKind::SequenceCopy => SyntheticTask::sequence_copy(seed),
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            train: TrainConfig::default(),
            sensitivity: SensitivityConfig::default(),
            model: default_mlp(0),
            task: SyntheticTask::teacher_student(0),
        }
        .with_seed(0)
    }
}

fn path_is(path: &[String], target: &[&str]) -> bool {
    path.len() == target.len() && path.iter().zip(target).all(|(a, b)| a == b)
}

fn flatten(value: &Value, path: &mut Vec<String>, out: &mut Vec<(Vec<String>, Value)>) {
    match value {
        Value::Object(map) if !OPAQUE.iter().any(|o| path_is(path, o)) => {
            for (k, v) in map {
                path.push(k.clone());
                flatten(v, path, out);
                path.pop();
            }
        }
        _ => out.push((path.clone(), value.clone())),
    }
}

/// Flat key for a nested path, or `None` for derived fields.
fn flat_key(path: &[String]) -> Option<String> {
    if DERIVED.iter().any(|d| path_is(path, d)) {
        return None;
    }
    for (prefix, nested) in SECTIONS {
        if path.len() > nested.len() && path_is(&path[..nested.len()], nested) {
            return Some(format!("{prefix}.{}", path[nested.len()..].join(".")));
        }
    }
    Some(path.join("."))
}

/// Nested path for a flat key (section prefixes resolved longest first).
fn nested_path(key: &str) -> Vec<String> {
    let parts: Vec<&str> = key.split('.').collect();
    for (prefix, nested) in SECTIONS {
        if parts.len() > 1 && parts[0] == prefix {
            return nested
                .iter()
                .chain(&parts[1..])
                .map(|s| s.to_string())
                .collect();
        }
    }
    parts.iter().map(|s| s.to_string()).collect()
}

fn slot<'a>(root: &'a mut Value, path: &[String]) -> Option<&'a mut Value> {
    path.iter().try_fold(root, |v, k| v.as_object_mut()?.get_mut(k))
}

impl RunConfig {
    /// Sets the run seed and every seed derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.sensitivity.hutch.seed = seed;
        self.task.seed = seed;
        let model_seed = rng::derive_seed(&[seed, MODEL_SEED_STREAM]);
        match &mut self.model {
            ModelSpec::Mlp(s) => s.seed = model_seed,
            ModelSpec::Transformer(s) => s.seed = model_seed,
        }
        self
    }

    pub fn to_flat(&self) -> Result<BTreeMap<String, Value>> {
        let nested = serde_json::to_value(self)?;
        let mut leaves = Vec::new();
        flatten(&nested, &mut Vec::new(), &mut leaves);
        Ok(leaves
            .into_iter()
            .filter_map(|(path, v)| flat_key(&path).map(|k| (k, v)))
            .collect())
    }

    /// Starts from `self` and applies flat `key -> value` overrides.
    pub fn merged(&self, flat: &Map<String, Value>) -> Result<Self> {
        let mut nested = serde_json::to_value(self)?;
        // switching architecture or task kind resets that section to its
        // defaults so stale fields of the old variant do not linger
        if let Some(arch) = flat.get("model.arch") {
            let spec = match arch.as_str() {
                Some("mlp") => default_mlp(0),
                Some("transformer") => default_transformer(0),
                _ => return Err(config_err(format!("unknown model.arch {arch}"))),
            };
            nested["model"] = serde_json::to_value(spec)?;
        }
        if let Some(kind) = flat.get("task.kind") {
            let kind: TaskKind = serde_json::from_value(kind.clone())
                .map_err(|e| config_err(format!("task.kind: {e}")))?;
            nested["task"] = serde_json::to_value(default_task(kind, 0))?;
        }
        for (key, value) in flat {
            let path = nested_path(key);
            if flat_key(&path).is_none() {
                return Err(config_err(format!(
                    "{key} is derived from the run seed or train.total_steps and cannot be set"
                )));
            }
            let target = slot(&mut nested, &path)
                .ok_or_else(|| config_err(format!("unknown config key {key:?}")))?;
            if target.is_object() && !OPAQUE.iter().any(|o| path_is(&path, o)) {
                return Err(config_err(format!("{key} is a section, not a value")));
            }
            *target = value.clone();
        }
        let cfg: RunConfig =
            serde_json::from_value(nested).map_err(|e| config_err(e.to_string()))?;
        let seed = cfg.seed;
        Ok(cfg.with_seed(seed))
    }

    pub fn from_flat(flat: &Map<String, Value>) -> Result<Self> {
        Self::default().merged(flat)
    }

    /// Applies one `key=value` override; the value is parsed as JSON and
    /// taken as a plain string if that fails.
    pub fn set(&self, key: &str, raw: &str) -> Result<Self> {
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut map = Map::new();
        map.insert(key.to_string(), value);
        self.merged(&map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: Value = serde_json::from_str(&text)?;
        let map = value
            .as_object()
            .ok_or_else(|| config_err("config file must be a JSON object of dotted keys"))?;
        Self::from_flat(map)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&self.to_flat()?)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}
