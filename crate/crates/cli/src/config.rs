//! Run configuration: defaults, then a JSON file, then `--section.key value`
//! flags, all addressed by the same flat dotted keys.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use pmbnn::signal::FilterConfig;
use pmbnn::training::{PmFitConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratio: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { ratio: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub noise_sigma_hr: f64,
    pub noise_sigma_vo2: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { noise_sigma_hr: 3.0, noise_sigma_vo2: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Source of all randomness; copied into `train.seed`.
    pub seed: u64,
    pub split: SplitConfig,
    pub filter: FilterConfig,
    pub train: TrainConfig,
    pub pm: PmFitConfig,
    pub synth: SynthConfig,
}

/// Bad key or value in a config file or dotted flag.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn flatten_into(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, child, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn flatten(v: &Value) -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    flatten_into("", v, &mut out);
    out
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), v.clone());
            } else {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("dotted keys never collide with leaves");
            }
        }
    }
    Value::Object(root)
}

impl RunConfig {
    /// Every settable key with its default.
    pub fn keys() -> BTreeMap<String, Value> {
        let mut flat = flatten(&serde_json::to_value(RunConfig::default()).expect("serializable"));
        flat.remove("train.seed");
        flat
    }

    /// Defaults, overlaid by `file` (flat dotted keys or nested objects) and
    /// then by `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)], seed: Option<u64>) -> Result<Self, ConfigError> {
        let known = Self::keys();
        let mut flat = known.clone();
        let mut apply = |key: &str, v: Value, origin: &str| -> Result<(), ConfigError> {
            if !known.contains_key(key) {
                return Err(ConfigError(format!("unknown key `{key}` in {origin}")));
            }
            flat.insert(key.to_string(), v);
            Ok(())
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
            if !v.is_object() {
                return Err(ConfigError(format!("{}: expected a JSON object", path.display())));
            }
            for (k, v) in flatten(&v) {
                apply(&k, v, &path.display().to_string())?;
            }
        }
        for (k, raw) in overrides {
            // Numbers and booleans parse as JSON; anything else is a string.
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            apply(k, v, "flags")?;
        }
        if let Some(s) = seed {
            flat.insert("seed".into(), Value::from(s));
        }
        let mut cfg: RunConfig = serde_json::from_value(unflatten(&flat))
            .map_err(|e| ConfigError(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.train.validate().map_err(|e| ConfigError(e.to_string()))?;
        if !(cfg.split.ratio > 0.0 && cfg.split.ratio < 1.0) {
            return Err(ConfigError(format!("split.ratio {} not in (0, 1)", cfg.split.ratio)));
        }
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        pmbnn::training::config_hash(self)
    }
}

/// Removes `--a.b value` and `--a.b=value` pairs from `args`, returning them
/// in order. Only keys containing a dot are taken.
pub fn extract_dotted(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), ConfigError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut pairs = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (body, None),
        };
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| ConfigError(format!("--{key} needs a value")))?,
        };
        pairs.push((key.to_string(), value));
    }
    Ok((rest, pairs))
}
