//! Flat `key = value` run configuration over every generator and training
//! field.
//!
//! Keys are dotted paths into the defaults: training fields are top-level
//! (`lr`, `epochs`, ...), nested groups use `model.`, `ablation.` and
//! `generator.` prefixes. Lists are comma-separated; `none` clears an
//! optional field.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use stas::data::GeneratorConfig;
use stas::training::TrainConfig;

use crate::CliError;

pub const SEED_ENV: &str = "STAS_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
}

/// Model fields that describe data geometry and follow the generator unless
/// set explicitly.
const GEOMETRY: [&str; 4] = ["model.channels", "model.scales", "model.max_lag", "model.input_scale"];

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn insert_path(root: &mut Map<String, Value>, key: &str, v: Value) {
    match key.split_once('.') {
        Some((head, rest)) => {
            let child = root.entry(head.to_string()).or_insert_with(|| Value::Object(Map::new()));
            if let Value::Object(m) = child {
                insert_path(m, rest, v);
            }
        }
        None => {
            root.insert(key.to_string(), v);
        }
    }
}

fn scalar(text: &str, like: &Value, key: &str) -> Result<Value, CliError> {
    let bad = || CliError::Config(format!("{key}: cannot parse {text:?}"));
    Ok(match like {
        Value::Bool(_) => Value::Bool(text.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_f64() => serde_json::Number::from_f64(text.parse().map_err(|_| bad())?)
            .map(Value::Number)
            .ok_or_else(bad)?,
        Value::Number(_) => Value::Number(text.parse::<u64>().map_err(|_| bad())?.into()),
        Value::String(_) => Value::String(text.to_string()),
        // optional fields default to null and hold integers here
        Value::Null => {
            if text.eq_ignore_ascii_case("none") {
                Value::Null
            } else {
                Value::Number(text.parse::<u64>().map_err(|_| bad())?.into())
            }
        }
        Value::Array(_) | Value::Object(_) => return Err(bad()),
    })
}

fn parse_value(text: &str, like: &Value, key: &str) -> Result<Value, CliError> {
    match like {
        Value::Array(items) => {
            let elem = items.first().cloned().unwrap_or(Value::Number(0.into()));
            let parts: Vec<&str> = text.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            let vals = parts.iter().map(|p| scalar(p, &elem, key)).collect::<Result<Vec<_>, _>>()?;
            Ok(Value::Array(vals))
        }
        _ => scalar(text, like, key),
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(","),
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Configuration under construction: defaults plus explicit assignments.
pub struct ConfigBuilder {
    defaults: BTreeMap<String, Value>,
    set: BTreeMap<String, Value>,
}

impl ConfigBuilder {
    pub fn new() -> Self {
        let mut defaults = BTreeMap::new();
        let v = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        flatten("", &v, &mut defaults);
        Self {
            defaults,
            set: BTreeMap::new(),
        }
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.set.contains_key(key)
    }

    pub fn assign(&mut self, key: &str, text: &str) -> Result<(), CliError> {
        let like = self
            .defaults
            .get(key)
            .ok_or_else(|| CliError::Config(format!("unknown configuration key {key:?}")))?;
        let v = parse_value(text.trim(), like, key)?;
        self.set.insert(key.to_string(), v);
        Ok(())
    }

    /// `key=value` as given on the command line.
    pub fn assign_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("expected key=value, got {pair:?}")))?;
        self.assign(k.trim(), v)
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            self.assign(k.trim(), v)
                .map_err(|e| CliError::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Seed from `STAS_SEED` when no seed was set.
    pub fn seed_fallback(&mut self) -> Result<(), CliError> {
        if self.is_set("seed") {
            return Ok(());
        }
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.assign("seed", &s)
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn build(&self) -> Result<RunConfig, CliError> {
        let mut root = Map::new();
        for (k, v) in self.defaults.iter().chain(&self.set) {
            insert_path(&mut root, k, v.clone());
        }
        let mut cfg: RunConfig =
            serde_json::from_value(Value::Object(root)).map_err(|e| CliError::Config(e.to_string()))?;
        let g = &cfg.generator;
        let m = &mut cfg.train.model;
        if !self.is_set(GEOMETRY[0]) {
            m.channels = g.channels;
        }
        if !self.is_set(GEOMETRY[1]) {
            m.scales = g.scales.clone();
        }
        if !self.is_set(GEOMETRY[2]) {
            m.max_lag = g.max_lag;
        }
        if !self.is_set(GEOMETRY[3]) {
            m.input_scale = g.max_scale();
        }
        cfg.generator.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for RunConfig {
    /// Every key in file syntax, sorted.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut flat = BTreeMap::new();
        flatten("", &serde_json::to_value(self).map_err(|_| fmt::Error)?, &mut flat);
        for (k, v) in flat {
            writeln!(f, "{k} = {}", render(&v))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_field_has_a_key() {
        let b = ConfigBuilder::new();
        let keys: Vec<&str> = b.defaults.keys().map(String::as_str).collect();
        for k in ["lr", "epochs", "seed", "fixed_lag", "plan_mode", "model.latent", "ablation.sfm", "generator.grid_h"] {
            assert!(keys.contains(&k), "{k} missing");
        }
    }

    #[test]
    fn file_values_and_overrides_apply() {
        let mut b = ConfigBuilder::new();
        b.apply_text("# comment\nlr = 0.003  # trailing\n\ngenerator.scales = 17, 9, 5, 3\nfixed_lag = 2\n", "t")
            .unwrap();
        b.assign_pair("lr=0.01").unwrap();
        let cfg = b.build().unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.generator.scales, vec![17, 9, 5, 3]);
        assert_eq!(cfg.train.model.scales, vec![17, 9, 5, 3]);
        assert_eq!(cfg.train.model.input_scale, 17);
        assert_eq!(cfg.train.fixed_lag, Some(2));
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        let mut b = ConfigBuilder::new();
        assert!(b.apply_text("learning_rate = 1", "t").is_err());
        assert!(b.apply_text("epochs = -3", "t").is_err());
        assert!(b.apply_text("epochs", "t").is_err());
        assert!(b.assign("ablation.sfm", "maybe").is_err());
    }

    #[test]
    fn rendered_config_parses_back() {
        let mut b = ConfigBuilder::new();
        b.assign("generator.bias", "0.25").unwrap();
        b.assign("plan_mode", "BatchMajority").unwrap();
        let cfg = b.build().unwrap();
        let mut again = ConfigBuilder::new();
        again.apply_text(&cfg.to_string(), "rendered").unwrap();
        assert_eq!(again.build().unwrap(), cfg);
    }
}
