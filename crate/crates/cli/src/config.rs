//! Layered configuration: preset defaults, then the TOML file, then flags.

use std::path::Path;

use bpc_core::models::{Family, ModelSpec};
use bpc_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Parsed config file; each command reads its own section.
#[derive(Debug, Default)]
pub struct ConfigFile {
    table: toml::Table,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)?;
        let table = text
            .parse::<toml::Table>()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(Self { table })
    }

    pub fn section(&self, name: &str) -> Result<Option<Value>> {
        match self.table.get(name) {
            None => Ok(None),
            Some(v @ toml::Value::Table(_)) => Ok(Some(to_json(v)?)),
            Some(_) => Err(Error::Config(format!("`{name}` must be a table"))),
        }
    }

    pub fn seed(&self) -> Result<Option<u64>> {
        match self.table.get("seed") {
            None => Ok(None),
            Some(toml::Value::Integer(s)) if *s >= 0 => Ok(Some(*s as u64)),
            Some(other) => Err(Error::Config(format!("seed must be a non-negative integer, got {other}"))),
        }
    }
}

fn to_json(v: &toml::Value) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::Config(e.to_string()))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Flag overrides collected as JSON values; unset flags are skipped.
#[derive(Default)]
pub struct Overrides(Map<String, Value>);

impl Overrides {
    pub fn set<T: Serialize>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.0
                .insert(key.to_string(), serde_json::to_value(v).expect("plain value"));
        }
        self
    }
}

pub fn layer<T: Serialize + DeserializeOwned>(base: &T, file: Option<Value>, flags: Overrides) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    if let Some(f) = file {
        merge(&mut v, f);
    }
    merge(&mut v, Value::Object(flags.0));
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

/// Model description as given on the command line or in `[model]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub hidden: usize,
    pub weight_decay: f64,
    /// Inferred from the labels when absent.
    pub classes: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: Family::SoftmaxLinear,
            hidden: 16,
            weight_decay: 0.01,
            classes: None,
        }
    }
}

impl ModelConfig {
    /// Builds the spec for data of dimension `dim`. The location model gets a
    /// standard normal prior and unit likelihood covariance.
    pub fn build(&self, dim: usize, labels: Option<&[usize]>) -> Result<ModelSpec> {
        let classes = || -> Result<usize> {
            match (self.classes, labels) {
                (Some(c), _) => Ok(c),
                (None, Some(l)) => Ok(l.iter().max().map_or(0, |m| m + 1)),
                (None, None) => Err(Error::Config("classifier data needs labels".into())),
            }
        };
        match self.family {
            Family::GaussianLocation => {
                use bpc_core::gaussapprox::Covariance;
                ModelSpec::gaussian_location(dim, vec![0.0; dim], Covariance::isotropic(1.0), Covariance::isotropic(1.0))
            }
            Family::SoftmaxLinear => ModelSpec::softmax_linear(dim, classes()?, self.weight_decay),
            Family::Mlp1Hidden => ModelSpec::mlp(dim, self.hidden, classes()?, self.weight_decay),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
