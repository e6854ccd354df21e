//! Run configuration: one TOML document holding the model, training,
//! dataset and evaluation settings, plus the output directory layout.
//!
//! Every key is optional in the input file; missing keys take their
//! defaults and the saved copy in a run directory lists every value.
//! Unknown keys and wrongly typed values are rejected with their dotted
//! path. `a.b=v` overrides are applied before validation; `v` is read as a
//! TOML value when it parses as one and as a string otherwise.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::model::SsiuConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root holding `{split}/HR` and `{split}/LR/x{s}`.
    pub root: PathBuf,
    pub train_split: String,
    /// Held-out split for validation PSNR; empty disables validation.
    pub val_split: String,
    /// Use only the first `n` training images (`0` = all).
    pub max_train_images: usize,
    pub max_val_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: PathBuf::new(),
            train_split: "train".into(),
            val_split: "val".into(),
            max_train_images: 0,
            max_val_images: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// LR tile side for tiled inference; `0` runs whole images.
    pub tile: usize,
    pub tile_overlap: usize,
    /// Write `bicubic | model | HR` strips into `reports/`.
    pub save_comparisons: bool,
    /// Centre-crop side of comparison strips in HR pixels (`0` = full).
    pub comparison_crop: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tile: 0,
            tile_overlap: 8,
            save_comparisons: false,
            comparison_crop: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed of parameter initialisation.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: SsiuConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            model: SsiuConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn cfg_err(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Checks `value` against the shape of `schema`, widening integers where a
/// float is expected.
fn conform(value: &mut Value, schema: &Value, path: &str) -> Result<()> {
    match (schema, &mut *value) {
        (Value::Table(s), Value::Table(t)) => {
            for (k, v) in t.iter_mut() {
                let field = join(path, k);
                let sub = s.get(k).ok_or_else(|| cfg_err(&field, "unknown key"))?;
                conform(v, sub, &field)?;
            }
            Ok(())
        }
        (Value::Float(_), Value::Integer(i)) => {
            *value = Value::Float(*i as f64);
            Ok(())
        }
        (Value::Array(s), Value::Array(a)) => {
            if let Some(proto) = s.first() {
                for (i, v) in a.iter_mut().enumerate() {
                    conform(v, proto, &format!("{path}[{i}]"))?;
                }
            }
            Ok(())
        }
        (s, v) if std::mem::discriminant(s) == std::mem::discriminant(v) => Ok(()),
        (s, v) => Err(cfg_err(
            path,
            format!("expected {}, found {}", type_name(s), type_name(v)),
        )),
    }
}

fn parse_override_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies one `a.b.c=value` assignment.
pub fn apply_override(doc: &mut Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| cfg_err(assignment, "override must look like key.path=value"))?;
    let path = path.trim();
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(cfg_err(path, "empty key in override path"));
    }
    let mut table = doc;
    for (i, k) in keys[..keys.len() - 1].iter().enumerate() {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        table = match entry {
            Value::Table(t) => t,
            _ => return Err(cfg_err(keys[..=i].join("."), "is not a table")),
        };
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses `text`, applies `overrides` and validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Table = toml::from_str(text).map_err(|e| cfg_err("<config>", e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let schema = Value::try_from(RunConfig::default()).expect("defaults serialize");
        let mut value = Value::Table(doc);
        conform(&mut value, &schema, "")?;
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| cfg_err("<config>", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.tile > 0 && self.eval.tile_overlap >= self.eval.tile {
            return Err(cfg_err("eval.tile_overlap", "must be smaller than eval.tile"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(cfg_err("output_dir", "must not be empty"));
        }
        Ok(())
    }

    /// Additional checks before training: the dataset must be reachable.
    pub fn validate_for_training(&self) -> Result<()> {
        self.validate()?;
        if self.data.root.as_os_str().is_empty() {
            return Err(cfg_err("data.root", "dataset path is required for training"));
        }
        if !self.data.root.is_dir() {
            return Err(cfg_err(
                "data.root",
                format!("{} is not a directory", self.data.root.display()),
            ));
        }
        let split = self.data.root.join(&self.data.train_split).join("HR");
        if !split.is_dir() {
            return Err(cfg_err(
                "data.train_split",
                format!("{} does not exist", split.display()),
            ));
        }
        if !self.data.val_split.is_empty() {
            let val = self.data.root.join(&self.data.val_split).join("HR");
            if !val.is_dir() {
                return Err(cfg_err(
                    "data.val_split",
                    format!("{} does not exist", val.display()),
                ));
            }
        }
        Ok(())
    }

    /// Canonical TOML with every value spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }
}

/// `output_dir` layout: `config.toml`, `checkpoints/`, `logs/`, `reports/`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunDirs {
    pub root: PathBuf,
    pub checkpoints: PathBuf,
    pub logs: PathBuf,
    pub reports: PathBuf,
}

impl RunDirs {
    pub fn new(root: &Path) -> Self {
        RunDirs {
            root: root.to_path_buf(),
            checkpoints: root.join("checkpoints"),
            logs: root.join("logs"),
            reports: root.join("reports"),
        }
    }

    pub fn create(root: &Path) -> Result<Self> {
        let d = Self::new(root);
        for p in [&d.root, &d.checkpoints, &d.logs, &d.reports] {
            fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
        }
        Ok(d)
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        let p = self.config_path();
        fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))
    }
}
