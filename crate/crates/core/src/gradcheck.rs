//! End-to-end finite-difference check of the joint loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::relative_error;
use crate::data::{pad_collection, SampleCollection};
use crate::model::{ModelConfig, MultiTaskModel, Topology};
use crate::params::ParamGrads;
use crate::train::{loss_and_grads, loss_value, Result, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckOptions {
    pub tasks: usize,
    pub seq_len: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub vocab: usize,
    pub step: f64,
    pub tolerance: f64,
    pub init_std: f64,
    pub l2_weight: f64,
    pub gate_self: bool,
    pub seed: u64,
    /// Test hook: perturb the analytic gradient of this parameter group.
    #[serde(skip)]
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            tasks: 2,
            seq_len: 3,
            embed_dim: 3,
            hidden: 3,
            classes: 2,
            vocab: 6,
            step: 1e-5,
            tolerance: 1e-4,
            init_std: 0.5,
            l2_weight: 1e-3,
            gate_self: true,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            out.push_str(&format!(
                "{:<32} {:>5} coords  max_rel_err {:.3e}  {}\n",
                g.name,
                g.coordinates,
                g.max_rel_error,
                if g.passed { "ok" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "overall: {} (tolerance {:.1e}, worst {:.3e})\n",
            if self.passed() { "PASS" } else { "FAIL" },
            self.tolerance,
            self.max_rel_error()
        ));
        out
    }
}

/// A fully connected model plus a random collection whose sequences have
/// different true lengths, so padding is exercised.
pub fn gradcheck_fixture(opts: &GradcheckOptions) -> Result<(MultiTaskModel, SampleCollection)> {
    let mut config = ModelConfig::new(
        vec![opts.classes; opts.tasks],
        vec![opts.vocab; opts.tasks],
        opts.embed_dim,
        opts.hidden,
    );
    config.topology = Topology::full(opts.tasks);
    config.init_std = opts.init_std;
    config.gate_self = opts.gate_self;
    let model = MultiTaskModel::new(config, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let raw: Vec<Vec<usize>> = (0..opts.tasks)
        .map(|k| {
            let len = if k % 2 == 0 { opts.seq_len } else { opts.seq_len.saturating_sub(1).max(1) };
            (0..len).map(|_| rng.random_range(1..opts.vocab)).collect()
        })
        .collect();
    let labels = (0..opts.tasks).map(|_| rng.random_range(0..opts.classes)).collect();
    Ok((model, pad_collection(raw, labels)))
}

/// Compares backpropagated gradients of the joint loss against central
/// differences for every coordinate of every parameter group.
pub fn check_model(
    model: &MultiTaskModel,
    collection: &SampleCollection,
    weights: &[f64],
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let (_, mut grads) = loss_and_grads(model, collection, weights, opts.l2_weight)?;
    if let Some(name) = &opts.corrupt {
        let id = model
            .params()
            .find(name)
            .ok_or_else(|| TrainError::Config(format!("no parameter group {name}")))?;
        corrupt(&mut grads, id);
    }
    let mut probe = model.clone();
    let mut groups = Vec::with_capacity(model.params().len());
    for id in model.params().ids() {
        let analytic = grads.get(id);
        let mut worst: f64 = 0.0;
        for i in 0..analytic.len() {
            let orig = probe.params().value(id).data()[i];
            probe.params_mut().value_mut(id).data_mut()[i] = orig + opts.step;
            let plus = loss_value(&probe, collection, weights, opts.l2_weight)?;
            probe.params_mut().value_mut(id).data_mut()[i] = orig - opts.step;
            let minus = loss_value(&probe, collection, weights, opts.l2_weight)?;
            probe.params_mut().value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        groups.push(GroupReport {
            name: model.params().name(id).to_string(),
            coordinates: analytic.len(),
            max_rel_error: worst,
            passed: worst < opts.tolerance,
        });
    }
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        groups,
    })
}

fn corrupt(grads: &mut ParamGrads, id: crate::params::ParamId) {
    for g in grads.get_mut(id).data_mut() {
        *g = *g * 1.5 + 0.1;
    }
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let (model, collection) = gradcheck_fixture(opts)?;
    check_model(&model, &collection, &vec![1.0; opts.tasks], opts)
}
