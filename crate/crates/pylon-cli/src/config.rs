//! Flat dotted-key JSON run configuration with flag overrides.
//!
//! The file is a single JSON object whose keys are dotted paths
//! (`"train.lr0": 1e-4`). Flags override file values; the fully resolved
//! map is persisted as `config.json` in every output directory so a run
//! can always be reproduced from its artifacts.

use std::collections::BTreeMap;
use std::path::Path;

use pylon_core::{PylonError, Result};
use serde_json::Value;

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<String, Value>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)?;
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| PylonError::Config(format!("{}: {e}", path.display())))?;
        let Value::Object(map) = parsed else {
            return Err(PylonError::Config(format!(
                "{}: config must be a JSON object of dotted keys",
                path.display()
            )));
        };
        Ok(RunConfig {
            values: map.into_iter().collect(),
        })
    }

    pub fn set(&mut self, key: &str, value: Value) {
        self.values.insert(key.to_string(), value);
    }

    fn get(&self, key: &str) -> Option<&Value> {
        self.values.get(key)
    }

    fn bad(key: &str, want: &str, got: &Value) -> PylonError {
        PylonError::Config(format!("config key `{key}`: expected {want}, got {got}"))
    }

    pub fn f64_or(&mut self, key: &str, default: f64) -> Result<f64> {
        let v = match self.get(key) {
            None => default,
            Some(v) => v
                .as_f64()
                .ok_or_else(|| Self::bad(key, "a number", v))?,
        };
        self.set(key, Value::from(v));
        Ok(v)
    }

    pub fn usize_or(&mut self, key: &str, default: usize) -> Result<usize> {
        let v = match self.get(key) {
            None => default,
            Some(v) => v
                .as_u64()
                .ok_or_else(|| Self::bad(key, "a non-negative integer", v))?
                as usize,
        };
        self.set(key, Value::from(v as u64));
        Ok(v)
    }

    pub fn u64_or(&mut self, key: &str, default: u64) -> Result<u64> {
        let v = match self.get(key) {
            None => default,
            Some(v) => v
                .as_u64()
                .ok_or_else(|| Self::bad(key, "a non-negative integer", v))?,
        };
        self.set(key, Value::from(v));
        Ok(v)
    }

    pub fn bool_or(&mut self, key: &str, default: bool) -> Result<bool> {
        let v = match self.get(key) {
            None => default,
            Some(v) => v.as_bool().ok_or_else(|| Self::bad(key, "a bool", v))?,
        };
        self.set(key, Value::from(v));
        Ok(v)
    }

    pub fn string_or(&mut self, key: &str, default: &str) -> Result<String> {
        let v = match self.get(key) {
            None => default.to_string(),
            Some(v) => v
                .as_str()
                .ok_or_else(|| Self::bad(key, "a string", v))?
                .to_string(),
        };
        self.set(key, Value::from(v.clone()));
        Ok(v)
    }

    pub fn string_list_or(&mut self, key: &str, default: &[&str]) -> Result<Vec<String>> {
        let v: Vec<String> = match self.get(key) {
            None => default.iter().map(|s| s.to_string()).collect(),
            Some(v) => v
                .as_array()
                .and_then(|a| {
                    a.iter()
                        .map(|x| x.as_str().map(str::to_string))
                        .collect::<Option<Vec<_>>>()
                })
                .ok_or_else(|| Self::bad(key, "an array of strings", v))?,
        };
        self.set(key, Value::from(v.clone()));
        Ok(v)
    }

    pub fn f64_list_or(&mut self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        let v: Vec<f64> = match self.get(key) {
            None => default.to_vec(),
            Some(v) => v
                .as_array()
                .and_then(|a| a.iter().map(|x| x.as_f64()).collect::<Option<Vec<_>>>())
                .ok_or_else(|| Self::bad(key, "an array of numbers", v))?,
        };
        self.set(key, Value::from(v.clone()));
        Ok(v)
    }

    pub fn usize_list_or(&mut self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        let v: Vec<u64> = match self.get(key) {
            None => default.iter().map(|&x| x as u64).collect(),
            Some(v) => v
                .as_array()
                .and_then(|a| a.iter().map(|x| x.as_u64()).collect::<Option<Vec<_>>>())
                .ok_or_else(|| Self::bad(key, "an array of integers", v))?,
        };
        self.set(key, Value::from(v.clone()));
        Ok(v.into_iter().map(|x| x as usize).collect())
    }

    /// Pairs of integers, e.g. audit shifts `[[32, 0], [0, 32]]`.
    pub fn pair_list_or(&mut self, key: &str, default: &[(i64, i64)]) -> Result<Vec<(i64, i64)>> {
        let v: Vec<(i64, i64)> = match self.get(key) {
            None => default.to_vec(),
            Some(v) => v
                .as_array()
                .and_then(|a| {
                    a.iter()
                        .map(|x| {
                            let p = x.as_array()?;
                            if p.len() != 2 {
                                return None;
                            }
                            Some((p[0].as_i64()?, p[1].as_i64()?))
                        })
                        .collect::<Option<Vec<_>>>()
                })
                .ok_or_else(|| Self::bad(key, "an array of [dy, dx] pairs", v))?,
        };
        self.set(
            key,
            Value::from(
                v.iter()
                    .map(|&(a, b)| Value::from(vec![a, b]))
                    .collect::<Vec<_>>(),
            ),
        );
        Ok(v)
    }

    /// Persist the resolved configuration into `dir/config.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.values)
            .map_err(|e| PylonError::Config(format!("config serialization: {e}")))?;
        std::fs::write(dir.join("config.json"), text + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_recorded_in_the_resolved_map() {
        let mut c = RunConfig::default();
        assert_eq!(c.f64_or("train.lr0", 1e-4).unwrap(), 1e-4);
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("config.json")).unwrap();
        assert!(text.contains("train.lr0"));
    }

    #[test]
    fn file_values_override_defaults_and_wrong_types_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"train.lr0": 0.01, "train.batch_size": "big"}"#).unwrap();
        let mut c = RunConfig::load(Some(&path)).unwrap();
        assert_eq!(c.f64_or("train.lr0", 1e-4).unwrap(), 0.01);
        assert!(c.usize_or("train.batch_size", 32).is_err());
    }

    #[test]
    fn non_object_config_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, "[1, 2]").unwrap();
        match RunConfig::load(Some(&path)) {
            Err(PylonError::Config(_)) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
