//! Train/evaluate harness shared by the CLI and the experiment tests:
//! seeded splits, joint runs oriented at one task, single-task baselines,
//! the pair-wise gain matrix and the `n0` sweep.

use serde::{Deserialize, Serialize};

use crate::data::{tos_sample_pools, pad_collection, Sample, Split, TaskDataset};
use crate::model::{ModelConfig, MultiTaskModel, Topology};
use crate::synth::task_seed;
use crate::train::{evaluate_accuracy, ppg, train, Result, TrainConfig, TrainError, TrainReport};

/// Datasets with a fixed train/validation/test partition.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub datasets: Vec<TaskDataset>,
    pub splits: Vec<Split>,
    pub train: Vec<Vec<Sample>>,
    pub valid: Vec<Vec<Sample>>,
    pub test: Vec<Vec<Sample>>,
}

impl Prepared {
    pub fn new(datasets: Vec<TaskDataset>, train_fraction: f64, valid_fraction: f64, seed: u64) -> Result<Self> {
        if datasets.is_empty() {
            return Err(TrainError::Empty("prepare"));
        }
        if !(train_fraction > 0.0 && valid_fraction >= 0.0 && train_fraction + valid_fraction < 1.0) {
            return Err(TrainError::Config(format!(
                "split fractions {train_fraction}/{valid_fraction} leave no test data"
            )));
        }
        let splits: Vec<Split> = datasets
            .iter()
            .enumerate()
            .map(|(k, d)| d.split(train_fraction, valid_fraction, task_seed(seed, k)))
            .collect();
        let pick = |d: &TaskDataset, idx: &[usize]| idx.iter().map(|&i| d.samples[i].clone()).collect::<Vec<_>>();
        let train = datasets.iter().zip(&splits).map(|(d, s)| pick(d, &s.train)).collect();
        let valid = datasets.iter().zip(&splits).map(|(d, s)| pick(d, &s.valid)).collect();
        let test: Vec<Vec<Sample>> = datasets.iter().zip(&splits).map(|(d, s)| pick(d, &s.test)).collect();
        if test.iter().any(Vec::is_empty) {
            return Err(TrainError::Empty("evaluate: a test split is empty"));
        }
        Ok(Self {
            datasets,
            splits,
            train,
            valid,
            test,
        })
    }

    pub fn tasks(&self) -> usize {
        self.datasets.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.datasets.iter().map(|d| d.name.clone()).collect()
    }

    fn pools(&self) -> Vec<&[Sample]> {
        self.train.iter().map(Vec::as_slice).collect()
    }

    /// Restriction to the given tasks, in the given order.
    pub fn select(&self, tasks: &[usize]) -> Self {
        Self {
            datasets: tasks.iter().map(|&k| self.datasets[k].clone()).collect(),
            splits: tasks.iter().map(|&k| self.splits[k].clone()).collect(),
            train: tasks.iter().map(|&k| self.train[k].clone()).collect(),
            valid: tasks.iter().map(|&k| self.valid[k].clone()).collect(),
            test: tasks.iter().map(|&k| self.test[k].clone()).collect(),
        }
    }
}

/// Model configuration for `prepared` under `config` and `topology`.
pub fn model_config(prepared: &Prepared, config: &TrainConfig, topology: Topology) -> ModelConfig {
    let mut mc = ModelConfig::new(
        prepared.datasets.iter().map(|d| d.class_count).collect(),
        prepared.datasets.iter().map(|d| d.vocab.len()).collect(),
        config.embed_dim,
        config.hidden,
    );
    mc.topology = topology;
    mc.gate_self = config.gate_self;
    mc.shared_embeddings = config.shared_embeddings;
    mc.init_std = config.init_std;
    mc
}

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct Run {
    pub model: MultiTaskModel,
    pub report: TrainReport,
    /// Test accuracy of every task, in task order.
    pub accuracy: Vec<f64>,
}

/// Trains jointly on collections sampled with TOS oriented at `oriented`
/// and evaluates every task on its test split.
pub fn run_joint(prepared: &Prepared, oriented: usize, config: &TrainConfig, topology: &Topology) -> Result<Run> {
    config.validate()?;
    if oriented >= prepared.tasks() {
        return Err(crate::data::DataError::InvalidTask {
            task: oriented,
            tasks: prepared.tasks(),
        }
        .into());
    }
    let collections = tos_sample_pools(&prepared.pools(), oriented, config.n0, config.seed)?;
    let mut model = MultiTaskModel::new(model_config(prepared, config, topology.clone()), config.seed)?;
    let report = train(&mut model, &collections, config)?;
    let pools = prepared.pools();
    let accuracy = (0..prepared.tasks())
        .map(|k| evaluate_accuracy(&model, &pools, k, &prepared.test[k], config.seed))
        .collect::<Result<_>>()?;
    Ok(Run {
        model,
        report,
        accuracy,
    })
}

/// Single-task baseline: a one-task model with no interactions and an
/// ungated self term, trained on the task's own samples only.
pub fn run_single(prepared: &Prepared, task: usize, config: &TrainConfig) -> Result<Run> {
    config.validate()?;
    let alone = prepared.select(&[task]);
    let single = TrainConfig {
        gate_self: false,
        task_weights: None,
        ..config.clone()
    };
    let collections: Vec<_> = alone.train[0]
        .iter()
        .map(|s| pad_collection(vec![s.tokens.clone()], vec![s.label]))
        .collect();
    let mut model = MultiTaskModel::new(model_config(&alone, &single, Topology::isolated(1)), config.seed)?;
    let report = train(&mut model, &collections, &single)?;
    let accuracy = vec![evaluate_accuracy(&model, &alone.pools(), 0, &alone.test[0], config.seed)?];
    Ok(Run {
        model,
        report,
        accuracy,
    })
}

/// Symmetric matrix of pair-wise performance gains, diagonal 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpgMatrix {
    pub names: Vec<String>,
    pub single: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl PpgMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = format!("task,{}\n", self.names.join(","));
        for (name, row) in self.names.iter().zip(&self.values) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        out
    }
}

/// For every pair `(i, j)`: trains the pair jointly twice, oriented at `i`
/// and at `j`, takes `P_i'` and `P_j'` from the run oriented at that task,
/// and compares against single-task accuracies.
pub fn ppg_matrix(prepared: &Prepared, config: &TrainConfig, topology_of_pair: &Topology) -> Result<PpgMatrix> {
    let k = prepared.tasks();
    if k < 2 {
        return Err(TrainError::Config("a gain matrix needs at least two tasks".into()));
    }
    let single = (0..k)
        .map(|t| run_single(prepared, t, config).map(|r| r.accuracy[0]))
        .collect::<Result<Vec<f64>>>()?;
    let mut values = vec![vec![1.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let pair = prepared.select(&[i, j]);
            let p_i = run_joint(&pair, 0, config, topology_of_pair)?.accuracy[0];
            let p_j = run_joint(&pair, 1, config, topology_of_pair)?.accuracy[1];
            let g = ppg(
                single[i].max(f64::MIN_POSITIVE),
                single[j].max(f64::MIN_POSITIVE),
                p_i.max(f64::MIN_POSITIVE),
                p_j.max(f64::MIN_POSITIVE),
            )?;
            values[i][j] = g;
            values[j][i] = g;
        }
    }
    Ok(PpgMatrix {
        names: prepared.names(),
        single,
        values,
    })
}

/// One row of an `n0` sweep: test accuracy of the oriented task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n0: usize,
    pub oriented: usize,
    pub accuracy: f64,
}

pub fn sweep_n0(
    prepared: &Prepared,
    oriented: &[usize],
    n0_values: &[usize],
    config: &TrainConfig,
    topology: &Topology,
) -> Result<Vec<SweepRow>> {
    if n0_values.is_empty() {
        return Err(TrainError::Empty("sweep"));
    }
    let mut rows = Vec::new();
    for &n0 in n0_values {
        let cfg = TrainConfig { n0, ..config.clone() };
        cfg.validate()?;
        for &k in oriented {
            let run = run_joint(prepared, k, &cfg, topology)?;
            rows.push(SweepRow {
                n0,
                oriented: k,
                accuracy: run.accuracy[k],
            });
        }
    }
    Ok(rows)
}

/// `n0,<task>_accuracy,...` with one line per `n0`; tasks not oriented in
/// the sweep are left out.
pub fn sweep_csv(rows: &[SweepRow], names: &[String]) -> String {
    let mut tasks: Vec<usize> = rows.iter().map(|r| r.oriented).collect();
    tasks.sort_unstable();
    tasks.dedup();
    let mut n0s: Vec<usize> = rows.iter().map(|r| r.n0).collect();
    n0s.dedup();
    let header: Vec<String> = tasks.iter().map(|&k| format!("{}_accuracy", names[k])).collect();
    let mut out = format!("n0,{}\n", header.join(","));
    for n0 in n0s {
        let cells: Vec<String> = tasks
            .iter()
            .map(|&k| {
                rows.iter()
                    .find(|r| r.n0 == n0 && r.oriented == k)
                    .map_or(String::new(), |r| format!("{:.6}", r.accuracy))
            })
            .collect();
        out.push_str(&format!("{n0},{}\n", cells.join(",")));
    }
    out
}
