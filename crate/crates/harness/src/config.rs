//! Declarative experiment definitions (TOML) with command-line overrides.
//!
//! ```toml
//! methods = ["source", "sfret", "gfret"]
//! seeds = [0, 1, 2]
//! out = "runs/gaussian"
//!
//! [model]
//! checkpoint = "../assets/source_cnn.json"
//!
//! [data]
//! synthetic = { size = 16, per_class = 100, seed = 1 }
//! corruptions = ["gaussian_noise-5"]
//!
//! [adaptation]
//! lr = 1e-4
//! lambda = 0.01
//!
//! [method_lr]
//! gfret = 1e-3
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fret_core::data::synthetic::{self, SyntheticSpec};
use fret_core::data::{CorruptionSpec, Dataset, LongTailSpec, ParamTable, StreamSpec};
use fret_core::engine::{AdaptationConfig, Method, Protocol};
use fret_core::model::{split, Classifier, SplitModel};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub adaptation: AdaptationConfig,
    /// Learning rate per method, overriding `adaptation.lr`.
    #[serde(default)]
    pub method_lr: BTreeMap<Method, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub checkpoint: PathBuf,
    #[serde(default = "default_cut")]
    pub cut: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory-of-arrays dataset with clean test images.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Generate the clean test images procedurally instead.
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    /// `kind-severity` entries, one stream segment each.
    pub corruptions: Vec<String>,
    #[serde(default)]
    pub table: ParamTable,
    #[serde(default)]
    pub longtail: Option<LongTailSpec>,
    #[serde(default)]
    pub archive_root: Option<PathBuf>,
}

fn default_methods() -> Vec<Method> {
    vec![Method::Source, Method::Sfret, Method::Gfret]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_cut() -> String {
    "head".into()
}

/// Command-line values that replace config entries when present.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub lr: Option<f64>,
    pub lambda: Option<f64>,
    pub k1: Option<usize>,
    pub k2: Option<f64>,
    pub protocol: Option<Protocol>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Reads a config file, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out);
        fix(&mut self.model.checkpoint);
        if let Some(p) = &mut self.data.path {
            fix(p);
        }
        if let Some(p) = &mut self.data.archive_root {
            fix(p);
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if !o.methods.is_empty() {
            self.methods = o.methods.clone();
        }
        if !o.seeds.is_empty() {
            self.seeds = o.seeds.clone();
        }
        if let Some(lr) = o.lr {
            self.adaptation.lr = lr;
            self.method_lr.clear();
        }
        if let Some(v) = o.lambda {
            self.adaptation.lambda = v;
        }
        if let Some(v) = o.k1 {
            self.adaptation.k1 = v;
        }
        if let Some(v) = o.k2 {
            self.adaptation.k2 = v;
        }
        if let Some(v) = o.protocol {
            self.adaptation.protocol = v;
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
    }

    pub fn corruptions(&self) -> Result<Vec<CorruptionSpec>> {
        self.data
            .corruptions
            .iter()
            .map(|s| s.parse().map_err(|e: fret_core::Error| HarnessError::Config(e.to_string())))
            .collect()
    }

    /// Checks everything that can be checked without running.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(HarnessError::Config(m));
        if self.methods.is_empty() {
            return err("no methods given".into());
        }
        if self.seeds.is_empty() {
            return err("no seeds given".into());
        }
        let corruptions = self.corruptions()?;
        if corruptions.is_empty() {
            return err("data.corruptions is empty".into());
        }
        if !self.model.checkpoint.is_file() {
            return err(format!("checkpoint {} does not exist", self.model.checkpoint.display()));
        }
        match (&self.data.path, &self.data.synthetic) {
            (Some(p), None) if !p.join("manifest.json").is_file() => {
                return err(format!("dataset {} has no manifest.json", p.display()));
            }
            (Some(_), None) | (None, Some(_)) => {}
            _ => return err("set exactly one of data.path and data.synthetic".into()),
        }
        let needs_archive = corruptions.iter().any(|c| !c.kind.is_native());
        match &self.data.archive_root {
            None if needs_archive => {
                return err("non-native corruptions need data.archive_root".into());
            }
            Some(root) if !root.is_dir() => {
                return err(format!("archive root {} does not exist", root.display()));
            }
            _ => {}
        }
        for m in &self.methods {
            self.adaptation_for(*m, 0)
                .validate()
                .map_err(|e| HarnessError::Config(format!("{m}: {e}")))?;
        }
        Ok(())
    }

    pub fn adaptation_for(&self, method: Method, seed: u64) -> AdaptationConfig {
        AdaptationConfig {
            method,
            seed,
            lr: self.method_lr.get(&method).copied().unwrap_or(self.adaptation.lr),
            ..self.adaptation.clone()
        }
    }

    pub fn stream_spec(&self, seed: u64) -> Result<StreamSpec> {
        Ok(StreamSpec {
            corruptions: self.corruptions()?,
            batch_size: self.adaptation.batch_size,
            longtail: self.data.longtail,
            table: self.data.table,
            seed,
            archive_root: self.data.archive_root.clone(),
        })
    }

    pub fn load_model(&self) -> Result<SplitModel> {
        let c = Classifier::load_json(&self.model.checkpoint)?;
        Ok(split(&c, &self.model.cut)?)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match (&self.data.path, &self.data.synthetic) {
            (Some(p), _) => Ok(Dataset::load(p)?),
            (None, Some(s)) => Ok(synthetic::generate(s)),
            (None, None) => Err(HarnessError::Config("no dataset configured".into())),
        }
    }
}
