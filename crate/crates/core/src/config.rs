//! Experiment configuration: JSON files with dotted-path overrides.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{make_blobs, split_labels, AugmentConfig, Dataset};
use crate::error::{param_err, CclError, Result};
use crate::losses::LossConfig;
use crate::network::NetworkConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training samples per class (labeled and unlabeled together).
    pub n_per_class: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub spread: f64,
    pub n_labeled: usize,
    /// Held-out evaluation samples per class.
    pub test_per_class: usize,
    /// Load the training set from CSV instead of generating blobs.
    pub train_csv: Option<PathBuf>,
    /// Evaluation set CSV; required together with `train_csv`.
    pub test_csv: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_per_class: 204,
            n_classes: 3,
            dim: 2,
            spread: 1.5,
            n_labeled: 12,
            test_per_class: 200,
            train_csv: None,
            test_csv: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub trainer: TrainConfig,
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `a.b.c=VALUE` to a JSON tree. `VALUE` is read as JSON when it
/// parses and as a bare string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CclError::Parameter(format!("override {assignment:?} lacks '='")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return param_err(format!("bad override path {path:?}"));
    }
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CclError::Parameter(format!("override {path:?} descends into a non-object")))?;
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| CclError::Parameter(format!("override {path:?} descends into a non-object")))?;
    obj.insert(keys[keys.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

impl RunConfig {
    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| CclError::Parameter(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| CclError::Parameter(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let file = File::open(path)?;
        let mut value: Value = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| CclError::Parameter(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg = Self::from_value(value)?;
        // Relative dataset paths are resolved against the config's directory.
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.data.train_csv, &mut cfg.data.test_csv].into_iter().flatten() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Returns a copy with overrides applied on top of this config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(self).map_err(|e| CclError::Parameter(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        self.network.validate()?;
        self.trainer.validate()?;
        let d = &self.data;
        if d.train_csv.is_some() != d.test_csv.is_some() {
            return param_err("data.train_csv and data.test_csv must be given together");
        }
        if d.train_csv.is_none() {
            if d.n_classes < 2 || d.dim < 2 || d.n_per_class == 0 || d.test_per_class == 0 {
                return param_err("data needs n_classes >= 2, dim >= 2 and non-empty splits");
            }
            if !(d.spread > 0.0 && d.spread.is_finite()) {
                return param_err("data.spread must be positive");
            }
            if d.n_labeled == 0 || d.n_labeled > d.n_per_class * d.n_classes {
                return param_err("data.n_labeled must lie in 1..=n_per_class*n_classes");
            }
            self.loss.validate(d.n_classes)?;
        }
        Ok(())
    }

    /// Training set (with labeled indices) and evaluation set.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        if let (Some(train), Some(test)) = (&d.train_csv, &d.test_csv) {
            let train = Dataset::read_csv(File::open(train)?, None)?;
            let test = Dataset::read_csv(File::open(test)?, Some(train.n_classes))?;
            if train.labeled_indices.is_empty() {
                return param_err("training CSV marks no sample as labeled");
            }
            if test.dim() != train.dim() || test.is_empty() {
                return param_err("test CSV must be non-empty and match the training dimension");
            }
            return Ok((train, test));
        }
        let all = make_blobs(
            self.seed,
            d.n_per_class + d.test_per_class,
            d.n_classes,
            d.dim,
            d.spread,
        )?;
        let (train, test) = all.holdout(d.test_per_class)?;
        let train = split_labels(&train, d.n_labeled, self.seed)?;
        Ok((train, test))
    }
}
