//! Layered configuration: built-in defaults, `TIDAS_OUT`, the JSON config
//! file, `key=value` overrides, then explicit flags.

use std::fmt;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};
use tidas_core::experiments::ExperimentConfig;

/// Problem with the user's configuration input.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

/// Deep-merges `patch` into `base`; every key in `patch` must exist in `base`.
pub fn merge(base: &mut Value, patch: &Value, path: &str) -> Result<(), ConfigError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => return Err(err(format!("unknown configuration key `{here}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

/// Parses `key=value`; the value is JSON when it parses as JSON, a string otherwise.
pub fn parse_override(text: &str) -> Result<(String, Value), ConfigError> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| err(format!("override `{text}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(err(format!("override `{text}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Sets the dotted `key` in `base`, which must already exist.
pub fn apply_override(base: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut patch = value;
    for part in key.rsplit('.') {
        let mut m = Map::new();
        m.insert(part.to_string(), patch);
        patch = Value::Object(m);
    }
    merge(base, &patch, "")
}

#[derive(Debug, Default, Clone)]
pub struct Layers<'a> {
    pub config_path: Option<&'a Path>,
    pub overrides: &'a [String],
    pub output_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub env_output_dir: Option<PathBuf>,
}

pub fn resolve(layers: &Layers) -> Result<ExperimentConfig, ConfigError> {
    let mut defaults = ExperimentConfig::default();
    if let Some(dir) = &layers.env_output_dir {
        defaults.output_dir = dir.clone();
    }
    let mut value = serde_json::to_value(&defaults).map_err(|e| err(e.to_string()))?;
    if let Some(path) = layers.config_path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| err(format!("cannot read config {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| err(format!("config {} is not valid JSON: {e}", path.display())))?;
        if !file.is_object() {
            return Err(err(format!("config {} must hold a JSON object", path.display())));
        }
        merge(&mut value, &file, "")?;
    }
    for o in layers.overrides {
        let (key, v) = parse_override(o)?;
        apply_override(&mut value, &key, v)?;
    }
    let mut cfg: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| err(format!("invalid configuration: {e}")))?;
    if let Some(dir) = &layers.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(w) = layers.workers {
        cfg.parallel_workers = w;
    }
    cfg.validate().map_err(|e| err(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_parse_json_or_fall_back_to_strings() {
        assert_eq!(parse_override("grid.count=50").unwrap(), ("grid.count".into(), json!(50)));
        assert_eq!(
            parse_override("delay_method=spectral").unwrap().1,
            json!("spectral")
        );
        assert_eq!(parse_override("depth=25e-3").unwrap().1, json!(0.025));
        assert!(parse_override("depth").is_err());
        assert!(parse_override("a..b=1").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected_at_any_level() {
        let mut v = json!({"a": {"b": 1}, "c": 2});
        assert!(apply_override(&mut v, "a.b", json!(3)).is_ok());
        assert_eq!(v, json!({"a": {"b": 3}, "c": 2}));
        assert!(apply_override(&mut v, "a.x", json!(1)).is_err());
        assert!(apply_override(&mut v, "z", json!(1)).is_err());
    }

    #[test]
    fn precedence_flag_over_override_over_file_over_env() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"depth": 0.02, "grid": {"count": 40}, "output_dir": "from_file"}"#)
            .unwrap();
        let overrides = vec!["depth=0.03".to_string()];
        let mut layers = Layers {
            config_path: Some(&path),
            overrides: &overrides,
            env_output_dir: Some("from_env".into()),
            ..Default::default()
        };
        let cfg = resolve(&layers).unwrap();
        assert_eq!(cfg.depth, 0.03);
        assert_eq!(cfg.depth_grid.count, 40);
        assert_eq!(cfg.output_dir, PathBuf::from("from_file"));
        layers.output_dir = Some("from_flag".into());
        layers.workers = Some(3);
        let cfg = resolve(&layers).unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("from_flag"));
        assert_eq!(cfg.parallel_workers, 3);
        layers.config_path = None;
        layers.output_dir = None;
        assert_eq!(resolve(&layers).unwrap().output_dir, PathBuf::from("from_env"));
    }

    #[test]
    fn invalid_values_are_reported() {
        let bad = vec!["grid.count=\"many\"".to_string()];
        let layers = Layers {
            overrides: &bad,
            ..Default::default()
        };
        assert!(resolve(&layers).is_err());
        let out_of_range = vec!["grid.max=0.5".to_string()];
        let layers = Layers {
            overrides: &out_of_range,
            ..Default::default()
        };
        assert!(resolve(&layers).is_err());
    }
}
