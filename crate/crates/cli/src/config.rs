//! Run configuration: command-line flags overlaid by an optional config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use spatboost::backfit::BackfitConfig;
use spatboost::panel::RateTransform;
use spatboost::spatial::MoranMethod;

use crate::error::{CliError, Result};
use crate::ingest::ResponseSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Covariates with a one-way partial dependence file.
    pub pd: Vec<String>,
    /// Covariate pairs with a two-way partial dependence file.
    pub pd_pairs: Vec<(String, String)>,
    pub pd_points: usize,
    pub interactions: bool,
    pub interaction_perms: usize,
    pub interaction_rows: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            pd: Vec::new(),
            pd_pairs: Vec::new(),
            pd_points: 20,
            interactions: false,
            interaction_perms: 199,
            interaction_rows: 500,
        }
    }
}

fn default_tract() -> String {
    "tract".into()
}

fn default_time() -> String {
    "time".into()
}

/// Everything `fit` needs; echoed into `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub data: PathBuf,
    pub adjacency: PathBuf,
    #[serde(default = "default_tract")]
    pub tract_column: String,
    #[serde(default = "default_time")]
    pub time_column: String,
    pub response: ResponseSpec,
    #[serde(default)]
    pub transform: RateTransform,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
    pub seed: u64,
    #[serde(default)]
    pub backfit: BackfitConfig,
    #[serde(default)]
    pub report: ReportConfig,
}

impl FitConfig {
    /// Routes the run seed into every seeded component.
    pub fn propagate_seed(&mut self) {
        self.backfit.boost.seed = self.seed;
        if let MoranMethod::Permutation { n_perm, .. } = self.backfit.moran {
            self.backfit.moran = MoranMethod::Permutation {
                n_perm,
                seed: self.seed,
            };
        }
    }
}

/// Reads a TOML (by extension) or JSON config file. A document with a
/// top-level `config` object, such as `run.json`, contributes that object.
pub fn read_config_file(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    let value: Value = if is_toml {
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
    } else {
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
    };
    let value = match value {
        Value::Object(mut m) if m.get("config").is_some_and(Value::is_object) => m.remove("config").unwrap(),
        v => v,
    };
    if !value.is_object() {
        return Err(CliError::Config(format!(
            "{}: top level must be a table/object",
            path.display()
        )));
    }
    Ok(value)
}

/// Recursively overlays `top` onto `base`: objects merge key by key, anything else replaces.
pub fn deep_merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `path` in a JSON object tree, creating intermediate objects.
pub fn set_path(root: &mut Value, path: &[&str], value: Value) {
    let mut cur = root;
    for key in &path[..path.len() - 1] {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        cur = cur
            .as_object_mut()
            .unwrap()
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    if !cur.is_object() {
        *cur = Value::Object(Map::new());
    }
    cur.as_object_mut()
        .unwrap()
        .insert(path[path.len() - 1].to_string(), value);
}

/// Flags first, then the config file on top, then typed decoding.
pub fn resolve<T: DeserializeOwned>(flags: Value, file: Option<&Path>) -> Result<T> {
    let mut merged = flags;
    if let Some(path) = file {
        deep_merge(&mut merged, read_config_file(path)?);
    }
    serde_json::from_value(merged).map_err(|e| CliError::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn file_overrides_flags_key_by_key() {
        let mut flags = json!({"seed": 1, "backfit": {"boost": {"nu": 0.1, "n_trees": 10}}});
        deep_merge(&mut flags, json!({"backfit": {"boost": {"nu": 0.5}}, "seed": 2}));
        assert_eq!(
            flags,
            json!({"seed": 2, "backfit": {"boost": {"nu": 0.5, "n_trees": 10}}})
        );
    }

    #[test]
    fn set_path_builds_nested_objects() {
        let mut v = json!({});
        set_path(&mut v, &["backfit", "boost", "nu"], json!(0.2));
        set_path(&mut v, &["backfit", "max_outer"], json!(3));
        assert_eq!(v, json!({"backfit": {"boost": {"nu": 0.2}, "max_outer": 3}}));
    }

    #[test]
    fn fit_config_round_trips_and_rejects_typos() {
        let v = json!({
            "data": "d.csv", "adjacency": "a.tsv", "seed": 4,
            "response": {"type": "column", "column": "y"},
            "backfit": {"boost": {"n_trees": 20}}
        });
        let mut cfg: FitConfig = serde_json::from_value(v).unwrap();
        cfg.propagate_seed();
        assert_eq!(cfg.backfit.boost.seed, 4);
        assert_eq!(cfg.backfit.boost.n_trees, 20);
        assert_eq!(cfg.tract_column, "tract");
        let again: FitConfig = serde_json::from_value(serde_json::to_value(&cfg).unwrap()).unwrap();
        assert_eq!(again, cfg);
        let bad =
            json!({"data": "d", "adjacency": "a", "seed": 1, "response": {"type": "column", "column": "y"}, "sede": 3});
        assert!(serde_json::from_value::<FitConfig>(bad).is_err());
    }

    #[test]
    fn toml_and_run_json_files() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("c.toml");
        fs::write(&toml_path, "seed = 9\n[backfit.boost]\nnu = 0.05\n").unwrap();
        assert_eq!(
            read_config_file(&toml_path).unwrap(),
            json!({"seed": 9, "backfit": {"boost": {"nu": 0.05}}})
        );
        let run = dir.path().join("run.json");
        fs::write(&run, r#"{"tool": "x", "config": {"seed": 3}}"#).unwrap();
        assert_eq!(read_config_file(&run).unwrap(), json!({"seed": 3}));
    }
}
