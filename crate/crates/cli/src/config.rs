use std::path::{Path, PathBuf};

use mmforge::data::SynthSpec;
use mmforge::eval::{EvalOptions, Experiment};
use mmforge::meta::{MetaConfig, TrainOptions};
use mmforge::model::{ModelConfig, Variant};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::CliError;

fn default_outlier_z() -> f64 {
    6.0
}
fn default_entity() -> String {
    "entity".into()
}
fn default_timestamp() -> String {
    "timestamp".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Raw input CSV for `preprocess`.
    pub raw: Option<PathBuf>,
    /// Processed dataset directory for the other commands.
    pub processed: Option<PathBuf>,
    #[serde(default = "default_entity")]
    pub entity_column: String,
    #[serde(default = "default_timestamp")]
    pub timestamp_column: String,
    #[serde(default = "default_outlier_z")]
    pub outlier_z: f64,
    /// Drop features whose spread relative to their level is below this.
    pub min_relative_spread: Option<f64>,
    /// Split lengths; when all are absent the series is split 60/20/20.
    pub train_len: Option<usize>,
    pub val_len: Option<usize>,
    pub test_len: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            raw: None,
            processed: None,
            entity_column: default_entity(),
            timestamp_column: default_timestamp(),
            outlier_z: default_outlier_z(),
            min_relative_spread: None,
            train_len: None,
            val_len: None,
            test_len: None,
        }
    }
}

impl DataSection {
    pub fn split_lengths(&self, len: usize) -> Result<(usize, usize, usize), CliError> {
        match (self.train_len, self.val_len, self.test_len) {
            (Some(a), Some(b), Some(c)) => Ok((a, b, c)),
            (None, None, None) => {
                let val = len / 5;
                let test = len / 5;
                Ok((len - val - test, val, test))
            }
            _ => Err(CliError::Usage(
                "data.train_len, data.val_len and data.test_len must be given together".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    /// Seeds of the grid; empty means the run seed alone.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub entities: usize,
    pub length: usize,
    pub spec: SynthSpec,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            entities: 20,
            length: 400,
            spec: SynthSpec::benchmark(3),
        }
    }
}

/// Everything a command needs, resolved before any compute starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataSection,
    pub model: ModelConfig,
    pub meta: MetaConfig,
    pub train: TrainOptions,
    pub eval: EvalOptions,
    pub ablate: AblateSection,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            data: DataSection::default(),
            model: ModelConfig::new(Variant::Mmformer, 96, 24, 0),
            meta: MetaConfig::default(),
            train: TrainOptions::default(),
            eval: EvalOptions::default(),
            ablate: AblateSection { seeds: Vec::new() },
            synth: SynthSection::default(),
        }
    }
}

/// Recursively overlays `over` onto `base`; tables merge, everything else
/// replaces.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side of `--set key=value` as a TOML value, falling
/// back to a bare string.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| CliError::Usage(format!("empty key in --set {key}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(CliError::Usage(format!("--set {key}: {p} is not a section"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Flag values that override file keys.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    /// `key=value` pairs with dotted keys.
    pub set: Vec<String>,
}

impl RunConfig {
    /// Defaults, then the file, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut table = Table::try_from(RunConfig::default()).map_err(|e| CliError::Usage(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let file_table: Table = text
                .parse()
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
            merge(&mut table, file_table);
        }
        for s in &overrides.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {s:?}")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        if let Some(seed) = overrides.seed {
            table.insert("seed".into(), Value::Integer(seed as i64));
        }
        if let Some(dir) = &overrides.output_dir {
            table.insert("output_dir".into(), Value::String(dir.display().to_string()));
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("invalid configuration: {}", e.message())))?;
        cfg.meta.validate().map_err(CliError::from)?;
        Ok(cfg)
    }

    pub fn output_dir(&self) -> Result<&Path, CliError> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| CliError::Usage("no output directory; pass --output-dir or set output_dir".into()))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Usage(e.to_string()))
    }

    /// SHA-256 over the sorted-key JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let serde_json::Value::Object(m) = &mut v {
            m.remove("output_dir");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            model: self.model.clone(),
            meta: self.meta.clone(),
            train: self.train.clone(),
            eval: self.eval.clone(),
        }
    }
}
