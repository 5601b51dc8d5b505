//! Experiment files: one TOML document holding the training configuration,
//! the dataset recipe, the protocol and the output location.
//!
//! Every section and key has a default, so a file only states what differs.
//! Unknown keys are rejected. [`ExperimentFile::to_toml`] writes the fully
//! resolved document, which loads back to an identical configuration.
//!
//! ```toml
//! [train]
//! method = "gga"
//! lr = 0.05
//!
//! [train.anneal]
//! rho = 1e-5
//! start = 100
//! end = 200
//!
//! [dataset]
//! kind = "toy"
//!
//! [protocol]
//! seeds = 3
//! ```
//!
//! The dataset is generated from `derive_seed(train.seed, 0, "dataset")`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::{
    make_gaussian_toy, make_generative, DomainDataset, GaussianToyConfig, GenerativeConfig,
};
use crate::error::{LabError, Result};
use crate::harness::{SplitMode, TrainConfig};
use crate::seed::derive_seed;

const SECTIONS: [&str; 4] = ["train", "dataset", "protocol", "output"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Toy,
    Generative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// Samples per domain for the generative recipe.
    pub n_per_domain: usize,
    pub toy: GaussianToyConfig,
    pub generative: GenerativeConfig,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            kind: DatasetKind::Toy,
            n_per_domain: 100,
            toy: GaussianToyConfig::default(),
            generative: GenerativeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSection {
    pub seeds: usize,
    pub splits: SplitMode,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        ProtocolSection {
            seeds: 3,
            splits: SplitMode::Fixed,
            jobs: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
    /// Write one telemetry JSONL file per run.
    pub telemetry: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: "out".into(),
            telemetry: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentFile {
    pub train: TrainConfig,
    pub dataset: DatasetSection,
    pub protocol: ProtocolSection,
    pub output: OutputSection,
}

impl ExperimentFile {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = toml::from_str(text).map_err(|e| LabError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let exp: ExperimentFile = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
        exp.validate()?;
        Ok(exp)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| LabError::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.protocol.seeds == 0 {
            return Err(LabError::Config("protocol.seeds must be at least 1".into()));
        }
        match self.dataset.kind {
            DatasetKind::Toy => self.dataset.toy.validate(),
            DatasetKind::Generative => self.dataset.generative.validate(),
        }
    }

    pub fn dataset_seed(&self) -> u64 {
        derive_seed(self.train.seed, 0, "dataset")
    }

    pub fn build_dataset(&self) -> Result<DomainDataset> {
        match self.dataset.kind {
            DatasetKind::Toy => make_gaussian_toy(&self.dataset.toy, self.dataset_seed()),
            DatasetKind::Generative => make_generative(
                &self.dataset.generative,
                self.dataset.n_per_domain,
                self.dataset_seed(),
            ),
        }
    }
}

/// Applies `key=value` to a raw document. Keys are dotted paths; a key whose
/// first segment is not a section name is looked up under `train`. Values are
/// parsed as TOML literals, falling back to a plain string.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| LabError::Config(format!("override '{assignment}' is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    if key.is_empty() {
        return Err(LabError::Config(format!(
            "override '{assignment}' has an empty key"
        )));
    }
    let mut path: Vec<&str> = key.split('.').collect();
    if !SECTIONS.contains(&path[0]) {
        path.insert(0, "train");
    }
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));

    let (last, parents) = path.split_last().expect("path is nonempty");
    let mut cursor = table;
    for seg in parents {
        let entry = cursor
            .entry(seg.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| LabError::Config(format!("override '{key}': '{seg}' is not a table")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}
