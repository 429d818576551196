//! The `mtlstm` command line.
//!
//! Precedence for every setting: command-line flag, then environment
//! (`MTLSTM_OUTPUT_ROOT` for the output root only), then the config file,
//! then built-in defaults. Each command writes into a fresh run directory
//! `<root>/<UTC timestamp>-seed<seed>` unless `--run-name` fixes the name.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::experiment::{ppg_matrix, run_joint, run_single, sweep_csv, sweep_n0, Prepared};
use crate::gradcheck::{run_gradcheck, GradcheckReport};
use crate::model::Topology;
use crate::synth::{synth_generate_with, Scenario, SynthOptions};
use crate::train::TrainError;

pub const OUTPUT_ROOT_ENV: &str = "MTLSTM_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "mtlstm", version, about = "Multi-task recurrent text classification")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root; run directories are created inside it.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    pub out: Option<PathBuf>,
    /// Fixed run directory name instead of `<timestamp>-seed<seed>`.
    #[arg(long, global = true)]
    pub run_name: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train joint models and single-task baselines, write checkpoints and metrics.
    Train,
    /// Finite-difference check of the full joint loss.
    Gradcheck {
        /// Number of tasks in the check fixture.
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Oriented-task test accuracy for each upsampling coefficient.
    SweepN0 {
        /// Comma-separated n0 values.
        #[arg(long, value_delimiter = ',', required = true)]
        n0: Vec<usize>,
    },
    /// Pair-wise performance gain matrix.
    Ppg,
    /// Generate a synthetic preset as dataset files plus a manifest config.
    Synth {
        /// Preset name; overrides the config scenario.
        #[arg(long)]
        scenario: Option<Scenario>,
        /// Samples per task; overrides `data.samples_per_task`.
        #[arg(long)]
        samples: Option<usize>,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(TrainError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("gradient check failed (worst relative error {0:.3e})")]
    GradcheckFailed(f64),
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        Self::Train(e)
    }
}

impl From<crate::data::DataError> for CliError {
    fn from(e: crate::data::DataError) -> Self {
        Self::Config(e.into())
    }
}

impl CliError {
    /// 2 for configuration problems, 3 for divergence, 4 for a failed
    /// gradient check, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Train(TrainError::Divergence { .. }) => 3,
            Self::Train(TrainError::Config(_)) => 2,
            Self::GradcheckFailed(_) => 4,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn require_data(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    Ok(())
}

/// Creates the run directory and echoes the effective config into it.
fn run_dir(common: &Common, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let root = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    let name = match &common.run_name {
        Some(n) => n.clone(),
        None => format!("{}-seed{}", chrono::Utc::now().format("%Y%m%dT%H%M%S"), cfg.seed),
    };
    let mut dir = root.join(&name);
    let mut suffix = 2;
    while common.run_name.is_none() && dir.exists() {
        dir = root.join(format!("{name}-{suffix}"));
        suffix += 1;
    }
    fs::create_dir_all(&dir).map_err(|source| CliError::Io {
        path: dir.clone(),
        source,
    })?;
    let effective = ExperimentConfig {
        output_dir: Some(root),
        ..cfg.clone()
    };
    write(&dir.join("config.toml"), &effective.to_toml()?)?;
    Ok(dir)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Train => cmd_train(&cli.common, &cfg),
        Command::Gradcheck { tasks, corrupt } => {
            let mut opts = cfg.gradcheck.clone();
            if let Some(k) = tasks {
                opts.tasks = k;
            }
            if let Some(seed) = cli.common.seed {
                opts.seed = seed;
            }
            opts.corrupt = corrupt;
            let report = cmd_gradcheck(&opts)?;
            print!("{}", report.to_text());
            if report.passed() {
                Ok(())
            } else {
                Err(CliError::GradcheckFailed(report.max_rel_error()))
            }
        }
        Command::SweepN0 { n0 } => cmd_sweep_n0(&cli.common, &cfg, &n0),
        Command::Ppg => cmd_ppg(&cli.common, &cfg),
        Command::Synth { scenario, samples } => cmd_synth(&cli.common, &cfg, scenario, samples),
    }
}

pub fn cmd_gradcheck(opts: &crate::gradcheck::GradcheckOptions) -> Result<GradcheckReport> {
    Ok(run_gradcheck(opts)?)
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    require_data(cfg)?;
    Ok(Prepared::new(
        cfg.datasets()?,
        cfg.eval.train_fraction,
        cfg.eval.valid_fraction,
        cfg.seed,
    )?)
}

/// Renders rows of `(task, single, joint)` test accuracies in percent.
pub fn accuracy_table(names: &[String], single: &[Option<f64>], joint: &[Option<f64>]) -> String {
    let width = names.iter().map(String::len).max().unwrap_or(4).max(7);
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |a| format!("{:.1}", 100.0 * a));
    let mut out = format!("{:<width$}  {:>8}  {:>8}  {:>7}\n", "task", "single", "joint", "gain");
    let mut gains = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let gain = match (single[i], joint[i]) {
            (Some(s), Some(j)) => {
                gains.push(100.0 * (j - s));
                format!("{:+.1}", 100.0 * (j - s))
            }
            _ => "-".into(),
        };
        out.push_str(&format!(
            "{name:<width$}  {:>8}  {:>8}  {gain:>7}\n",
            cell(single[i]),
            cell(joint[i])
        ));
    }
    if !gains.is_empty() {
        let mean = gains.iter().sum::<f64>() / gains.len() as f64;
        out.push_str(&format!("{:<width$}  {:>8}  {:>8}  {:>+7.1}\n", "average", "", "", mean));
    }
    out
}

fn cmd_train(common: &Common, cfg: &ExperimentConfig) -> Result<()> {
    let prepared = prepare(cfg)?;
    let dir = run_dir(common, cfg)?;
    let names = prepared.names();
    let train_cfg = cfg.train_config();
    let topology = cfg.topology.build(prepared.tasks())?;
    let k = prepared.tasks();
    let mut single = vec![None; k];
    let mut joint = vec![None; k];
    for t in cfg.oriented() {
        let run = run_joint(&prepared, t, &train_cfg, &topology)?;
        joint[t] = Some(run.accuracy[t]);
        write(&dir.join(format!("metrics_{}.csv", names[t])), &run.report.to_csv(&names))?;
        run.model
            .save(&dir.join(format!("model_{}.json", names[t])))
            .map_err(TrainError::from)?;
        if cfg.eval.baseline {
            single[t] = Some(run_single(&prepared, t, &train_cfg)?.accuracy[0]);
        }
    }
    let table = accuracy_table(&names, &single, &joint);
    let mut csv = String::from("task,single_accuracy,joint_accuracy\n");
    let mut report = format!("seed: {}\ntasks: {}\n", cfg.seed, names.join(","));
    let fmt = |v: Option<f64>| v.map_or(String::new(), |a| format!("{a:.6}"));
    for (t, name) in names.iter().enumerate() {
        csv.push_str(&format!("{name},{},{}\n", fmt(single[t]), fmt(joint[t])));
        if let Some(a) = joint[t] {
            report.push_str(&format!("{name}.joint_accuracy: {a:.6}\n"));
        }
        if let Some(a) = single[t] {
            report.push_str(&format!("{name}.single_accuracy: {a:.6}\n"));
        }
    }
    write(&dir.join("accuracy.csv"), &csv)?;
    write(&dir.join("report.txt"), &report)?;
    print!("{table}");
    println!("outputs: {}", dir.display());
    Ok(())
}

fn cmd_sweep_n0(common: &Common, cfg: &ExperimentConfig, n0: &[usize]) -> Result<()> {
    if let Some(bad) = n0.iter().find(|&&v| v < 1) {
        return Err(ConfigError::Invalid {
            field: "--n0".into(),
            message: format!("values must be >= 1, got {bad}"),
        }
        .into());
    }
    let prepared = prepare(cfg)?;
    let dir = run_dir(common, cfg)?;
    let topology = cfg.topology.build(prepared.tasks())?;
    let rows = sweep_n0(&prepared, &cfg.oriented(), n0, &cfg.train_config(), &topology)?;
    let csv = sweep_csv(&rows, &prepared.names());
    write(&dir.join("sweep_n0.csv"), &csv)?;
    print!("{csv}");
    println!("outputs: {}", dir.display());
    Ok(())
}

fn cmd_ppg(common: &Common, cfg: &ExperimentConfig) -> Result<()> {
    let prepared = prepare(cfg)?;
    if prepared.tasks() < 2 {
        return Err(ConfigError::Invalid {
            field: "data".into(),
            message: "a gain matrix needs at least two tasks".into(),
        }
        .into());
    }
    let dir = run_dir(common, cfg)?;
    let pair = Topology::uniform(2, cfg.topology.coupling, cfg.topology.local_fusion, cfg.topology.global_fusion);
    let m = ppg_matrix(&prepared, &cfg.train_config(), &pair)?;
    let csv = m.to_csv();
    write(&dir.join("ppg.csv"), &csv)?;
    print!("{csv}");
    println!("outputs: {}", dir.display());
    Ok(())
}

fn cmd_synth(common: &Common, cfg: &ExperimentConfig, scenario: Option<Scenario>, samples: Option<usize>) -> Result<()> {
    let scenario = scenario.or(cfg.data.scenario).ok_or_else(|| ConfigError::Invalid {
        field: "data.scenario".into(),
        message: "no scenario given (use --scenario or the config)".into(),
    })?;
    let opts = SynthOptions {
        samples_per_task: samples.unwrap_or(cfg.data.samples_per_task),
    };
    let datasets = synth_generate_with(scenario, &opts, cfg.seed)?;
    let dir = run_dir(common, cfg)?;
    let mut manifest = cfg.clone();
    manifest.output_dir = None;
    manifest.data.scenario = None;
    manifest.data.samples_per_task = opts.samples_per_task;
    manifest.data.datasets.clear();
    for d in &datasets {
        let file = format!("{}.tsv", d.name);
        d.write(&dir.join(&file))?;
        manifest.data.datasets.push(crate::config::DatasetEntry {
            name: d.name.clone(),
            path: PathBuf::from(file),
            class_count: d.class_count,
        });
    }
    write(&dir.join("datasets.toml"), &manifest.to_toml()?)?;
    println!("wrote {} datasets to {}", datasets.len(), dir.display());
    Ok(())
}
