//! Joint objective, plain SGD, the stochastic training loop, accuracy and
//! the pair-wise performance gain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::data::{pad_collection, DataError, Sample, SampleCollection};
use crate::model::{ModelError, MultiTaskModel};
use crate::params::{Bound, ParamGrads, ParamKind, ParamStore};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("gradient for parameter {0} is missing or non-finite")]
    BadGradient(String),
    #[error("nothing to {0}")]
    Empty(&'static str),
    #[error("performance values must lie in (0, 1], got {0}")]
    Performance(f64),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        Self::Model(ModelError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Hyperparameters. Defaults: `eta = 0.1`,
/// L2 weight `1e-5`, `d = 300`, `n = 100`, `n0 = 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2_weight: f64,
    /// Per-task loss weights; all ones when absent.
    pub task_weights: Option<Vec<f64>>,
    pub n0: usize,
    pub epochs: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub init_std: f64,
    pub gate_self: bool,
    pub shared_embeddings: bool,
    /// Stop when the epoch mean loss has not improved for this many epochs.
    pub patience: Option<usize>,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            l2_weight: 1e-5,
            task_weights: None,
            n0: 2,
            epochs: 5,
            embed_dim: 300,
            hidden: 100,
            init_std: 0.1,
            gate_self: true,
            shared_embeddings: false,
            patience: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be > 0".into()));
        }
        if !(self.l2_weight >= 0.0 && self.l2_weight.is_finite()) {
            return Err(TrainError::Config("l2_weight must be >= 0".into()));
        }
        if let Some(w) = &self.task_weights {
            if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || !w.iter().any(|&x| x > 0.0) {
                return Err(TrainError::Config(
                    "task_weights must be >= 0 with at least one positive".into(),
                ));
            }
        }
        if self.n0 < 1 {
            return Err(TrainError::Config("n0 must be >= 1".into()));
        }
        if self.embed_dim == 0 || self.hidden == 0 {
            return Err(TrainError::Config("embed_dim and hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn weights(&self, tasks: usize) -> Result<Vec<f64>> {
        match &self.task_weights {
            None => Ok(vec![1.0; tasks]),
            Some(w) if w.len() == tasks => Ok(w.clone()),
            Some(w) => Err(TrainError::Config(format!(
                "{} task weights for {tasks} tasks",
                w.len()
            ))),
        }
    }
}

/// Tape handles of a joint loss evaluation.
#[derive(Debug, Clone)]
pub struct LossNodes {
    pub total: Var,
    /// Unweighted cross-entropy of each task.
    pub per_task: Vec<Var>,
}

/// `sum_k w_k * CE(y_hat_k, onehot(y_k)) + l2 * sum ||W||^2` over weight
/// matrices (biases and embeddings excluded). Zero-weight tasks contribute
/// nothing to the total.
pub fn joint_loss(
    tape: &mut Tape,
    bound: &Bound,
    model: &MultiTaskModel,
    collection: &SampleCollection,
    task_weights: &[f64],
    l2_weight: f64,
) -> Result<LossNodes> {
    let k_tasks = model.num_tasks();
    if collection.tasks() != k_tasks || collection.labels.len() != k_tasks {
        return Err(ModelError::TaskCount {
            expected: k_tasks,
            got: collection.tasks(),
        }
        .into());
    }
    if task_weights.len() != k_tasks {
        return Err(TrainError::Config(format!(
            "{} task weights for {k_tasks} tasks",
            task_weights.len()
        )));
    }
    let pass = model.forward(tape, bound, collection)?;
    let mut per_task = Vec::with_capacity(k_tasks);
    let mut terms = Vec::new();
    for (k, &probs) in pass.probs.iter().enumerate() {
        let truth = Tensor::one_hot(model.config().class_counts[k], collection.labels[k])?;
        let ce = tape.cross_entropy(probs, &truth)?;
        per_task.push(ce);
        let w = task_weights[k];
        if w != 0.0 {
            terms.push(if w == 1.0 { ce } else { tape.scale(ce, w)? });
        }
    }
    if l2_weight > 0.0 {
        let mut norms = Vec::new();
        for id in model.params().ids() {
            if model.params().entry(id).kind == ParamKind::Weight {
                norms.push(tape.sum_squares(bound.var(id))?);
            }
        }
        if !norms.is_empty() {
            let total = tape.add_all(&norms)?;
            terms.push(tape.scale(total, l2_weight)?);
        }
    }
    let total = if terms.is_empty() {
        tape.leaf(Tensor::scalar(0.0))
    } else {
        tape.add_all(&terms)?
    };
    Ok(LossNodes { total, per_task })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub per_task: Vec<f64>,
}

/// Loss value and gradients for every parameter of `model`.
pub fn loss_and_grads(
    model: &MultiTaskModel,
    collection: &SampleCollection,
    task_weights: &[f64],
    l2_weight: f64,
) -> Result<(LossValue, ParamGrads)> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let nodes = joint_loss(&mut tape, &bound, model, collection, task_weights, l2_weight)?;
    let grads = tape.backward(nodes.total)?;
    let value = LossValue {
        total: tape.value(nodes.total).to_scalar()?,
        per_task: nodes
            .per_task
            .iter()
            .map(|&v| tape.value(v).to_scalar())
            .collect::<std::result::Result<_, _>>()?,
    };
    Ok((value, bound.gradients(&tape, &grads)))
}

/// Loss value only.
pub fn loss_value(
    model: &MultiTaskModel,
    collection: &SampleCollection,
    task_weights: &[f64],
    l2_weight: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let nodes = joint_loss(&mut tape, &bound, model, collection, task_weights, l2_weight)?;
    Ok(tape.value(nodes.total).to_scalar()?)
}

/// `theta <- theta - lr * grad`, in parameter order.
pub fn sgd_step(store: &mut ParamStore, grads: &ParamGrads, learning_rate: f64) -> Result<()> {
    if grads.grads.len() != store.len() {
        return Err(TrainError::BadGradient(format!(
            "{} gradients for {} parameters",
            grads.grads.len(),
            store.len()
        )));
    }
    for id in store.ids().collect::<Vec<_>>() {
        let g = grads.get(id);
        if g.shape() != store.value(id).shape() || !g.is_finite() {
            return Err(TrainError::BadGradient(store.name(id).to_string()));
        }
    }
    for id in store.ids().collect::<Vec<_>>() {
        let g = grads.get(id).data();
        for (p, gi) in store.value_mut(id).data_mut().iter_mut().zip(g) {
            *p -= learning_rate * gi;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub joint: f64,
    pub per_task: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<StepLoss>,
    pub stopped_early: bool,
}

impl TrainReport {
    /// `step,joint_loss,<task>_loss...` with LF line endings.
    pub fn to_csv(&self, task_names: &[String]) -> String {
        let mut out = String::from("step,joint_loss");
        for name in task_names {
            out.push_str(&format!(",{name}_loss"));
        }
        out.push('\n');
        for s in &self.losses {
            out.push_str(&format!("{},{}", s.step, s.joint));
            for l in &s.per_task {
                out.push_str(&format!(",{l}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().map(|s| s.joint)
    }
}

/// Runs `epochs * N` SGD steps, each on a collection drawn uniformly at
/// random with the configured seed.
pub fn train(model: &mut MultiTaskModel, collections: &[SampleCollection], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if collections.is_empty() {
        return Err(TrainError::Empty("train on"));
    }
    let weights = config.weights(model.num_tasks())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let per_epoch = collections.len();
    let mut report = TrainReport::default();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..config.epochs {
        let mut epoch_total = 0.0;
        for i in 0..per_epoch {
            let step = epoch * per_epoch + i;
            let c = &collections[rng.random_range(0..per_epoch)];
            let (loss, grads) = loss_and_grads(model, c, &weights, config.l2_weight).map_err(|e| match e {
                TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. })) => {
                    TrainError::Divergence { step, loss: f64::NAN }
                }
                other => other,
            })?;
            if !loss.total.is_finite() {
                return Err(TrainError::Divergence { step, loss: loss.total });
            }
            sgd_step(model.params_mut(), &grads, config.learning_rate).map_err(|e| match e {
                TrainError::BadGradient(_) => TrainError::Divergence { step, loss: loss.total },
                other => other,
            })?;
            epoch_total += loss.total;
            report.losses.push(StepLoss {
                step,
                joint: loss.total,
                per_task: loss.per_task,
            });
        }
        if let Some(patience) = config.patience {
            let mean = epoch_total / per_epoch as f64;
            if mean < best {
                best = mean;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    report.stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(report)
}

fn mix(seed: u64, value: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ value.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_key(seed: u64, sample: &Sample) -> u64 {
    let mut h = mix(seed, sample.label as u64);
    for &t in &sample.tokens {
        h = mix(h, t as u64);
    }
    h
}

/// Builds the evaluation collection for `sample` of task `task`. Other
/// tasks' inputs come from their training pools, chosen by a seeded draw
/// keyed on the sample's content so the result does not depend on
/// evaluation order.
pub fn evaluation_collection(pools: &[&[Sample]], task: usize, sample: &Sample, seed: u64) -> Result<SampleCollection> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_key(seed, sample));
    let mut raw = Vec::with_capacity(pools.len());
    let mut labels = Vec::with_capacity(pools.len());
    for (j, pool) in pools.iter().enumerate() {
        if j == task {
            raw.push(sample.tokens.clone());
            labels.push(sample.label);
        } else {
            if pool.is_empty() {
                return Err(TrainError::Empty("draw companion inputs from"));
            }
            let s = &pool[rng.random_range(0..pool.len())];
            raw.push(s.tokens.clone());
            labels.push(s.label);
        }
    }
    Ok(pad_collection(raw, labels))
}

/// Accuracy of task `task` on `split`: argmax of the predicted distribution
/// (ties to the lowest class) against the label.
pub fn evaluate_accuracy(
    model: &MultiTaskModel,
    companion_pools: &[&[Sample]],
    task: usize,
    split: &[Sample],
    seed: u64,
) -> Result<f64> {
    if split.is_empty() {
        return Err(TrainError::Empty("evaluate"));
    }
    if companion_pools.len() != model.num_tasks() {
        return Err(ModelError::TaskCount {
            expected: model.num_tasks(),
            got: companion_pools.len(),
        }
        .into());
    }
    let mut correct = 0usize;
    for sample in split {
        let c = evaluation_collection(companion_pools, task, sample, seed)?;
        let probs = model.predict(&c)?;
        if probs[task].argmax() == sample.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Pair-wise performance gain `sqrt((P_i' P_j') / (P_i P_j))`.
pub fn ppg(p_i: f64, p_j: f64, p_i_joint: f64, p_j_joint: f64) -> Result<f64> {
    for p in [p_i, p_j, p_i_joint, p_j_joint] {
        if !(p > 0.0 && p <= 1.0) {
            return Err(TrainError::Performance(p));
        }
    }
    Ok(((p_i_joint * p_j_joint) / (p_i * p_j)).sqrt())
}
