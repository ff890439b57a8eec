//! Training run configuration: a flat JSON document of trainer keys plus
//! `data` and `model` sections.

use std::path::PathBuf;

use deep_eigenmaps::data::{generate_blobs, generate_moons, generate_rings, Dataset};
use deep_eigenmaps::encoder::{DEFAULT_EMBEDDING_DIM, DEFAULT_HIDDEN};
use deep_eigenmaps::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Blobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        separation: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    Moons {
        per_class: usize,
        noise: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    Rings {
        classes: usize,
        per_class: usize,
        noise: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        has_labels: bool,
    },
}

impl DataSource {
    /// Fills an unset generator seed with the run seed.
    pub fn resolve_seed(&mut self, run_seed: u64) {
        match self {
            DataSource::Blobs { seed, .. } | DataSource::Moons { seed, .. } | DataSource::Rings { seed, .. } => {
                seed.get_or_insert(run_seed);
            }
            DataSource::Csv { .. } => {}
        }
    }

    pub fn load(&self) -> Result<Dataset<f32>, CliError> {
        let seed = |s: &Option<u64>| s.unwrap_or(0);
        let ds = match self {
            DataSource::Blobs {
                classes,
                per_class,
                dim,
                separation,
                seed: s,
            } => generate_blobs(*classes, *per_class, *dim, *separation, seed(s)),
            DataSource::Moons { per_class, noise, seed: s } => generate_moons(*per_class, *noise, seed(s)),
            DataSource::Rings {
                classes,
                per_class,
                noise,
                seed: s,
            } => generate_rings(*classes, *per_class, *noise, seed(s)),
            DataSource::Csv { path, has_labels } => Dataset::load_csv(path, *has_labels),
        };
        ds.map_err(|e| CliError::usage(format!("data: {e}")))
    }

    pub fn input_path(&self) -> Option<&PathBuf> {
        match self {
            DataSource::Csv { path, .. } => Some(path),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN.to_vec(),
            embedding_dim: DEFAULT_EMBEDDING_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn section<T: for<'de> Deserialize<'de>>(name: &str, value: Value) -> Result<T, CliError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let key = if path == "." { name.to_string() } else { format!("{name}.{path}") };
        CliError::config(key, e.into_inner().to_string())
    })
}

impl RunConfig {
    /// Parses and validates a config document. `seed_override` replaces the
    /// document's `seed`.
    pub fn parse(text: &str, seed_override: Option<u64>) -> Result<Self, CliError> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| CliError::usage(format!("config is not valid JSON: {e}")))?;
        let Value::Object(mut map) = value else {
            return Err(CliError::usage("config must be a JSON object"));
        };
        let data = map
            .remove("data")
            .ok_or_else(|| CliError::config("data", "missing data section"))?;
        let mut data: DataSource = section("data", data)?;
        let model: ModelConfig = match map.remove("model") {
            Some(v) => section("model", v)?,
            None => ModelConfig::default(),
        };
        let mut train: TrainConfig = serde_path_to_error::deserialize(Value::Object(map)).map_err(|e| {
            let key = e.path().to_string();
            CliError::config(key, e.into_inner().to_string())
        })?;
        if let Some(seed) = seed_override {
            train.seed = seed;
        }
        data.resolve_seed(train.seed);
        train.validate().map_err(CliError::from)?;
        if model.embedding_dim == 0 {
            return Err(CliError::config("model.embedding_dim", "must be positive"));
        }
        if model.hidden.contains(&0) {
            return Err(CliError::config("model.hidden", "widths must be positive"));
        }
        Ok(Self { data, model, train })
    }

    /// Fully materialized document, defaults included.
    pub fn resolved(&self) -> Value {
        let mut map = match serde_json::to_value(&self.train) {
            Ok(Value::Object(m)) => m,
            _ => Map::new(),
        };
        map.insert("data".into(), serde_json::to_value(&self.data).unwrap_or(Value::Null));
        map.insert("model".into(), serde_json::to_value(&self.model).unwrap_or(Value::Null));
        Value::Object(map)
    }

    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.model.hidden);
        dims.push(self.model.embedding_dim);
        dims
    }
}
