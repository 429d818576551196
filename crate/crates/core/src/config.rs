//! Versioned TOML experiment configuration.
//!
//! ```toml
//! version = 1
//! seed = 7
//! output_dir = "runs"
//!
//! [data]
//! scenario = "multi-domain"      # or one [[data.datasets]] table per task
//! samples_per_task = 750
//!
//! [topology]
//! coupling = true
//! local_fusion = true
//! global_fusion = true
//! exclude_pairs = [[0, 2]]       # no coupling or local fusion between 0 and 2
//!
//! [train]
//! learning_rate = 0.1
//! epochs = 5
//!
//! [eval]
//! train_fraction = 0.8
//! valid_fraction = 0.1
//! oriented = [0, 1, 2]           # default: every task
//! baseline = true
//! ```
//!
//! Relative dataset paths are resolved against the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{load_dataset, unify_vocab, DataError, DatasetSchema, TaskDataset};
use crate::gradcheck::GradcheckOptions;
use crate::model::Topology;
use crate::synth::{synth_generate_with, Scenario, SynthOptions};
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: field `{field}`: {message}")]
    Field {
        path: PathBuf,
        field: String,
        message: String,
    },
    #[error("field `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("cannot serialize config: {0}")]
    Serialize(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub name: String,
    pub path: PathBuf,
    pub class_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub scenario: Option<Scenario>,
    pub samples_per_task: usize,
    pub datasets: Vec<DatasetEntry>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            scenario: None,
            samples_per_task: SynthOptions::default().samples_per_task,
            datasets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologySection {
    pub coupling: bool,
    pub local_fusion: bool,
    pub global_fusion: bool,
    /// Task pairs with neither coupling nor local fusion.
    pub exclude_pairs: Vec<[usize; 2]>,
}

impl Default for TopologySection {
    fn default() -> Self {
        Self {
            coupling: true,
            local_fusion: true,
            global_fusion: true,
            exclude_pairs: Vec::new(),
        }
    }
}

impl TopologySection {
    pub fn build(&self, tasks: usize) -> Result<Topology> {
        let mut t = Topology::uniform(tasks, self.coupling, self.local_fusion, self.global_fusion);
        for (i, &[a, b]) in self.exclude_pairs.iter().enumerate() {
            if a >= tasks || b >= tasks || a == b {
                return Err(invalid(
                    format!("topology.exclude_pairs[{i}]"),
                    format!("[{a}, {b}] is not a pair of distinct tasks below {tasks}"),
                ));
            }
            t.set_coupling(a, b, false);
            t.set_coupling(b, a, false);
            t.set_local_fusion(a, b, false);
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub train_fraction: f64,
    pub valid_fraction: f64,
    /// Tasks to orient joint runs at; every task when absent.
    pub oriented: Option<Vec<usize>>,
    /// Also train single-task baselines.
    pub baseline: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            valid_fraction: 0.1,
            oriented: None,
            baseline: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataSection,
    pub topology: TopologySection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub gradcheck: GradcheckOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            output_dir: None,
            data: DataSection::default(),
            topology: TopologySection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            gradcheck: GradcheckOptions::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses `text`; errors name the offending field path.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Field {
            path: origin.to_path_buf(),
            field: String::from("<document>"),
            message: e.message().to_string(),
        })?;
        serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Field {
            path: origin.to_path_buf(),
            field: e.path().to_string(),
            message: e.inner().message().to_string(),
        })
    }

    /// Reads, resolves relative dataset paths and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for d in &mut cfg.data.datasets {
            if d.path.is_relative() {
                d.path = base.join(&d.path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(invalid(
                "version",
                format!("unsupported version {} (expected {CONFIG_VERSION})", self.version),
            ));
        }
        match (&self.data.scenario, self.data.datasets.is_empty()) {
            (Some(_), false) => return Err(invalid("data", "give either `scenario` or `datasets`, not both")),
            (None, true) => return Err(invalid("data", "give a `scenario` or at least one `datasets` entry")),
            _ => {}
        }
        if self.data.scenario.is_some() && self.data.samples_per_task == 0 {
            return Err(invalid("data.samples_per_task", "must be positive"));
        }
        for (i, d) in self.data.datasets.iter().enumerate() {
            if !d.path.is_file() {
                return Err(invalid(
                    format!("data.datasets[{i}].path"),
                    format!("no such file {}", d.path.display()),
                ));
            }
            if d.class_count < 2 {
                return Err(invalid(format!("data.datasets[{i}].class_count"), "must be at least 2"));
            }
        }
        let k = self.tasks();
        self.topology.build(k)?;
        self.train
            .validate()
            .map_err(|e| invalid("train", e.to_string()))?;
        self.train.weights(k).map_err(|e| invalid("train.task_weights", e.to_string()))?;
        let e = &self.eval;
        if !(e.train_fraction > 0.0 && e.valid_fraction >= 0.0 && e.train_fraction + e.valid_fraction < 1.0) {
            return Err(invalid("eval", "fractions must leave a non-empty test split"));
        }
        if let Some(o) = &e.oriented {
            if o.is_empty() {
                return Err(invalid("eval.oriented", "must name at least one task"));
            }
            if let Some(bad) = o.iter().find(|&&t| t >= k) {
                return Err(invalid("eval.oriented", format!("task {bad} out of range for {k} tasks")));
            }
        }
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        match self.data.scenario {
            Some(s) => s.generators().len(),
            None => self.data.datasets.len(),
        }
    }

    pub fn oriented(&self) -> Vec<usize> {
        self.eval.oriented.clone().unwrap_or_else(|| (0..self.tasks()).collect())
    }

    /// Generates or loads the datasets, merging vocabularies when the
    /// embedding table is shared.
    pub fn datasets(&self) -> Result<Vec<TaskDataset>> {
        let ds = match self.data.scenario {
            Some(s) => synth_generate_with(
                s,
                &SynthOptions {
                    samples_per_task: self.data.samples_per_task,
                },
                self.seed,
            )?,
            None => self
                .data
                .datasets
                .iter()
                .map(|d| {
                    load_dataset(
                        &d.path,
                        &DatasetSchema {
                            name: d.name.clone(),
                            class_count: d.class_count,
                            vocab: None,
                        },
                    )
                })
                .collect::<std::result::Result<_, _>>()?,
        };
        Ok(if self.train.shared_embeddings { unify_vocab(&ds) } else { ds })
    }

    /// Training configuration with the run seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// The effective configuration as TOML, with defaults filled in.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
