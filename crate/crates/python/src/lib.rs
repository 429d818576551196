//! Python bindings: datasets, topologies, models, sampling and training.

use std::path::PathBuf;

use mtlstm::data::{load_dataset, DatasetSchema};
use mtlstm::gradcheck::{run_gradcheck, GradcheckOptions};
use mtlstm::synth::SynthOptions;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// One labelled text classification task.
#[pyclass(module = "mtlstm_py", skip_from_py_object)]
#[derive(Clone)]
pub struct Dataset {
    inner: mtlstm::TaskDataset,
}

#[pymethods]
impl Dataset {
    /// Builds a dataset from whitespace tokenised texts.
    #[new]
    fn new(name: String, class_count: usize, texts: Vec<String>, labels: Vec<usize>) -> PyResult<Self> {
        if texts.len() != labels.len() {
            return Err(err(format!("{} texts but {} labels", texts.len(), labels.len())));
        }
        let vocab = mtlstm::Vocab::build(texts.iter().flat_map(|t| t.split_whitespace()));
        let samples = texts
            .iter()
            .zip(labels)
            .map(|(t, label)| mtlstm::Sample {
                tokens: t.split_whitespace().map(|w| vocab.id(w)).collect(),
                label,
            })
            .collect();
        let inner = mtlstm::TaskDataset::new(name, samples, class_count, vocab).map_err(err)?;
        Ok(Self { inner })
    }

    /// Reads a `label<TAB>tokens` file.
    #[staticmethod]
    fn load(path: PathBuf, name: String, class_count: usize) -> PyResult<Self> {
        let schema = DatasetSchema { name, class_count, vocab: None };
        Ok(Self { inner: load_dataset(&path, &schema).map_err(err)? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).map_err(err)
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.inner.class_count
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab.len()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(token_ids, label)` pairs.
    fn samples(&self) -> Vec<(Vec<usize>, usize)> {
        self.inner.samples.iter().map(|s| (s.tokens.clone(), s.label)).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(name={:?}, samples={}, classes={}, vocab={})",
            self.inner.name,
            self.inner.len(),
            self.inner.class_count,
            self.inner.vocab.len()
        )
    }
}

/// Which coupling, local fusion and global fusion layers are enabled.
#[pyclass(module = "mtlstm_py", skip_from_py_object)]
#[derive(Clone)]
pub struct Topology {
    inner: mtlstm::Topology,
}

#[pymethods]
impl Topology {
    #[staticmethod]
    fn full(tasks: usize) -> Self {
        Self { inner: mtlstm::Topology::full(tasks) }
    }

    #[staticmethod]
    fn isolated(tasks: usize) -> Self {
        Self { inner: mtlstm::Topology::isolated(tasks) }
    }

    #[staticmethod]
    fn uniform(tasks: usize, coupling: bool, local_fusion: bool, global_fusion: bool) -> Self {
        Self { inner: mtlstm::Topology::uniform(tasks, coupling, local_fusion, global_fusion) }
    }

    #[getter]
    fn tasks(&self) -> usize {
        self.inner.tasks()
    }

    fn set_coupling(&mut self, source: usize, target: usize, enabled: bool) -> PyResult<()> {
        self.check(&[source, target])?;
        self.inner.set_coupling(source, target, enabled);
        Ok(())
    }

    fn set_local_fusion(&mut self, j: usize, k: usize, enabled: bool) -> PyResult<()> {
        self.check(&[j, k])?;
        self.inner.set_local_fusion(j, k, enabled);
        Ok(())
    }

    fn set_global_fusion(&mut self, enabled: bool) {
        self.inner.set_global_fusion(enabled);
    }

    fn coupling_edges(&self) -> Vec<(usize, usize)> {
        self.inner.coupling_edges()
    }

    fn local_pairs(&self) -> Vec<(usize, usize)> {
        self.inner.local_pairs()
    }

    #[getter]
    fn global_fusion(&self) -> bool {
        self.inner.global_fusion()
    }
}

impl Topology {
    fn check(&self, tasks: &[usize]) -> PyResult<()> {
        match tasks.iter().find(|&&t| t >= self.inner.tasks()) {
            Some(t) => Err(err(format!("task {t} out of range for {} tasks", self.inner.tasks()))),
            None => Ok(()),
        }
    }
}

/// Multi-task recurrent classifier.
#[pyclass(module = "mtlstm_py", skip_from_py_object)]
#[derive(Clone)]
pub struct Model {
    inner: mtlstm::MultiTaskModel,
}

fn collection(inputs: Vec<Vec<usize>>, labels: Option<Vec<usize>>) -> mtlstm::SampleCollection {
    let labels = labels.unwrap_or_else(|| vec![0; inputs.len()]);
    mtlstm::pad_collection(inputs, labels)
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (class_counts, vocab_sizes, embed_dim, hidden, topology=None, seed=0, gate_self=true, init_std=0.1, shared_embeddings=false))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        class_counts: Vec<usize>,
        vocab_sizes: Vec<usize>,
        embed_dim: usize,
        hidden: usize,
        topology: Option<PyRef<'_, Topology>>,
        seed: u64,
        gate_self: bool,
        init_std: f64,
        shared_embeddings: bool,
    ) -> PyResult<Self> {
        let tasks = class_counts.len();
        let mut cfg = mtlstm::ModelConfig::new(class_counts, vocab_sizes, embed_dim, hidden);
        cfg.topology = topology.map_or_else(|| mtlstm::Topology::full(tasks), |t| t.inner.clone());
        cfg.gate_self = gate_self;
        cfg.init_std = init_std;
        cfg.shared_embeddings = shared_embeddings;
        Ok(Self { inner: mtlstm::MultiTaskModel::new(cfg, seed).map_err(err)? })
    }

    /// A model sized for `datasets` with all interactions enabled.
    #[staticmethod]
    #[pyo3(signature = (datasets, embed_dim, hidden, topology=None, seed=0))]
    fn for_datasets(
        datasets: Vec<PyRef<'_, Dataset>>,
        embed_dim: usize,
        hidden: usize,
        topology: Option<PyRef<'_, Topology>>,
        seed: u64,
    ) -> PyResult<Self> {
        let classes = datasets.iter().map(|d| d.inner.class_count).collect();
        let vocabs = datasets.iter().map(|d| d.inner.vocab.len()).collect();
        Self::new(classes, vocabs, embed_dim, hidden, topology, seed, true, 0.1, false)
    }

    #[getter]
    fn num_tasks(&self) -> usize {
        self.inner.num_tasks()
    }

    #[getter]
    fn topology(&self) -> Topology {
        Topology { inner: self.inner.topology().clone() }
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params().entries().iter().map(|e| e.name.clone()).collect()
    }

    fn parameter(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let id = self.inner.params().find(name).ok_or_else(|| err(format!("no parameter {name}")))?;
        let t = self.inner.params().value(id);
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }

    /// Class distributions, one list per task, for one sequence per task.
    fn predict(&self, inputs: Vec<Vec<usize>>) -> PyResult<Vec<Vec<f64>>> {
        let probs = self.inner.predict(&collection(inputs, None)).map_err(err)?;
        Ok(probs.into_iter().map(|p| p.into_data()).collect())
    }

    /// Weighted joint cross-entropy plus L2 penalty for one collection.
    #[pyo3(signature = (inputs, labels, l2_weight=0.0, weights=None))]
    fn loss(&self, inputs: Vec<Vec<usize>>, labels: Vec<usize>, l2_weight: f64, weights: Option<Vec<f64>>) -> PyResult<f64> {
        let weights = weights.unwrap_or_else(|| vec![1.0; self.inner.num_tasks()]);
        mtlstm::train::loss_value(&self.inner, &collection(inputs, Some(labels)), &weights, l2_weight).map_err(err)
    }

    /// Trains on Task Oriented Sampling collections for task `oriented`
    /// and returns the per-step joint losses.
    #[pyo3(signature = (datasets, oriented, epochs=5, learning_rate=0.1, n0=2, l2_weight=1e-5, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        datasets: Vec<PyRef<'_, Dataset>>,
        oriented: usize,
        epochs: usize,
        learning_rate: f64,
        n0: usize,
        l2_weight: f64,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let owned: Vec<mtlstm::TaskDataset> = datasets.iter().map(|d| d.inner.clone()).collect();
        let collections = mtlstm::tos_sample(&owned, oriented, n0, seed).map_err(err)?;
        let cfg = mtlstm::TrainConfig {
            learning_rate,
            l2_weight,
            n0,
            epochs,
            seed,
            ..mtlstm::TrainConfig::default()
        };
        let report = mtlstm::train(&mut self.inner, &collections, &cfg).map_err(err)?;
        Ok(report.losses.iter().map(|l| l.joint).collect())
    }

    fn to_checkpoint(&self) -> PyResult<String> {
        self.inner.to_checkpoint().map_err(err)
    }

    #[staticmethod]
    fn from_checkpoint(text: &str) -> PyResult<Self> {
        Ok(Self { inner: mtlstm::MultiTaskModel::from_checkpoint(text).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: mtlstm::MultiTaskModel::load(&path).map_err(err)? })
    }
}

/// Generates a synthetic preset: `multi-cardinality`, `multi-domain` or
/// `multi-objective`.
#[pyfunction]
#[pyo3(signature = (scenario, seed=0, samples_per_task=500))]
fn synth_generate(scenario: &str, seed: u64, samples_per_task: usize) -> PyResult<Vec<Dataset>> {
    let scenario: mtlstm::Scenario = scenario.parse().map_err(err)?;
    let ds = mtlstm::synth::synth_generate_with(scenario, &SynthOptions { samples_per_task }, seed).map_err(err)?;
    Ok(ds.into_iter().map(|inner| Dataset { inner }).collect())
}

/// `(inputs, labels, sources)` of one sampled collection.
type Collection = (Vec<Vec<usize>>, Vec<usize>, Vec<usize>);

/// Task Oriented Sampling. Returns `(inputs, labels, sources)` triples.
#[pyfunction]
fn tos_sample(
    datasets: Vec<PyRef<'_, Dataset>>,
    oriented: usize,
    n0: usize,
    seed: u64,
) -> PyResult<Vec<Collection>> {
    let owned: Vec<mtlstm::TaskDataset> = datasets.iter().map(|d| d.inner.clone()).collect();
    let out = mtlstm::tos_sample(&owned, oriented, n0, seed).map_err(err)?;
    Ok(out.into_iter().map(|c| (c.inputs, c.labels, c.sources)).collect())
}

/// Pairwise performance gain from single and joint accuracies.
#[pyfunction]
fn ppg(p_i: f64, p_j: f64, p_i_joint: f64, p_j_joint: f64) -> PyResult<f64> {
    mtlstm::ppg(p_i, p_j, p_i_joint, p_j_joint).map_err(err)
}

/// Finite-difference check of the joint loss. Returns
/// `(passed, max_relative_error, report_text)`.
#[pyfunction]
#[pyo3(signature = (tasks=2, seed=0))]
fn gradcheck(tasks: usize, seed: u64) -> PyResult<(bool, f64, String)> {
    let report = run_gradcheck(&GradcheckOptions { tasks, seed, ..GradcheckOptions::default() }).map_err(err)?;
    Ok((report.passed(), report.max_rel_error(), report.to_text()))
}

#[pymodule]
fn mtlstm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Topology>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(synth_generate, m)?)?;
    m.add_function(wrap_pyfunction!(tos_sample, m)?)?;
    m.add_function(wrap_pyfunction!(ppg, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
